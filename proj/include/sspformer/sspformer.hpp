#pragma once

#include "sspformer/core/errors.hpp"
#include "sspformer/core/shape.hpp"
#include "sspformer/core/rng.hpp"
#include "sspformer/core/tensor.hpp"
#include "sspformer/core/fts.hpp"
#include "sspformer/core/fft.hpp"
#include "sspformer/core/ops.hpp"
#include "sspformer/core/hash.hpp"
#include "sspformer/core/autodiff.hpp"
#include "sspformer/augment/augment.hpp"
#include "sspformer/metrics/metrics.hpp"
#include "sspformer/data/phantom.hpp"
#include "sspformer/data/nifti.hpp"
#include "sspformer/model/model.hpp"
#include "sspformer/train/train.hpp"
#include "sspformer/cli/config.hpp"
