#pragma once

#include "aim/errors.hpp"
#include "aim/tensor.hpp"
#include "aim/tensor_io.hpp"
#include "aim/autodiff.hpp"
#include "aim/layers.hpp"
#include "aim/networks.hpp"
#include "aim/losses.hpp"
#include "aim/synthdata.hpp"
#include "aim/trainer.hpp"
#include "aim/evaluator.hpp"
#include "aim/gradcheck.hpp"
#include "aim/run_config.hpp"
