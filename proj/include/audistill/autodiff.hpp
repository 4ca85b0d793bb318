#pragma once

#include "audistill/autodiff/grad.hpp"
#include "audistill/autodiff/ops.hpp"
#include "audistill/autodiff/tensor.hpp"
