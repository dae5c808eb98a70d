#pragma once

#include "vmrfa/config.hpp"
#include "vmrfa/data.hpp"
#include "vmrfa/evaluator.hpp"
#include "vmrfa/gradcheck.hpp"
#include "vmrfa/graph.hpp"
#include "vmrfa/losses.hpp"
#include "vmrfa/mrfa.hpp"
#include "vmrfa/network.hpp"
#include "vmrfa/ops.hpp"
#include "vmrfa/serialize.hpp"
#include "vmrfa/tensor.hpp"
#include "vmrfa/trainer.hpp"
