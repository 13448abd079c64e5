#pragma once

#include "pargan/tensor/autograd.hpp"
#include "pargan/tensor/conv.hpp"
#include "pargan/tensor/norm.hpp"
#include "pargan/tensor/ops.hpp"
#include "pargan/tensor/tensor.hpp"
