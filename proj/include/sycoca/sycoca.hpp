// Umbrella header.
#pragma once

#include "sycoca/ablation.hpp"
#include "sycoca/checkpoint.hpp"
#include "sycoca/config.hpp"
#include "sycoca/data.hpp"
#include "sycoca/errors.hpp"
#include "sycoca/eval.hpp"
#include "sycoca/graph.hpp"
#include "sycoca/image.hpp"
#include "sycoca/masking.hpp"
#include "sycoca/mat.hpp"
#include "sycoca/model.hpp"
#include "sycoca/objectives.hpp"
#include "sycoca/optim.hpp"
#include "sycoca/rng.hpp"
#include "sycoca/tokenizer.hpp"
#include "sycoca/trainer.hpp"
