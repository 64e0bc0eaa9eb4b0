#pragma once

// Umbrella header for the whole library.

#include "uedkl/autodiff.hpp"
#include "uedkl/base_learner.hpp"
#include "uedkl/checkpoint.hpp"
#include "uedkl/common.hpp"
#include "uedkl/config.hpp"
#include "uedkl/dataset.hpp"
#include "uedkl/encoder.hpp"
#include "uedkl/ensemble.hpp"
#include "uedkl/mat.hpp"
#include "uedkl/metrics.hpp"
#include "uedkl/optim.hpp"
#include "uedkl/payload_prep.hpp"
#include "uedkl/pipeline.hpp"
#include "uedkl/prediction_io.hpp"
#include "uedkl/rng.hpp"
#include "uedkl/svgp.hpp"
