#pragma once

// Umbrella header for the e2efs library: ensemble end-to-end networks with
// gradient-saliency feature selection for audio paralinguistics tasks.

#include "e2efs/config.hpp"
#include "e2efs/data.hpp"
#include "e2efs/dsp.hpp"
#include "e2efs/ensemble.hpp"
#include "e2efs/errors.hpp"
#include "e2efs/eval.hpp"
#include "e2efs/losses.hpp"
#include "e2efs/mask.hpp"
#include "e2efs/matrix.hpp"
#include "e2efs/model_io.hpp"
#include "e2efs/nn.hpp"
#include "e2efs/rng.hpp"
#include "e2efs/selection.hpp"
#include "e2efs/train.hpp"
#include "e2efs/wav.hpp"
