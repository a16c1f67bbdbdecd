#pragma once

#include "wf/testing/attention_reference.hpp"
#include "wf/testing/reference.hpp"

namespace oracle = wf::testing;
