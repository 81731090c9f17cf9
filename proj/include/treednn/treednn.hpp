#pragma once

#include "treednn/error.hpp"
#include "treednn/rng.hpp"
#include "treednn/tensor.hpp"
#include "treednn/ops.hpp"
#include "treednn/layers.hpp"
#include "treednn/optim.hpp"
#include "treednn/model.hpp"
#include "treednn/data.hpp"
#include "treednn/training.hpp"
#include "treednn/bundle.hpp"
#include "treednn/runtime.hpp"
