#pragma once

#include "audistill/audio_io.hpp"
#include "audistill/autodiff.hpp"
#include "audistill/distill.hpp"
#include "audistill/dsp.hpp"
#include "audistill/error.hpp"
#include "audistill/features.hpp"
#include "audistill/harness/config.hpp"
#include "audistill/harness/corpus.hpp"
#include "audistill/harness/pipeline.hpp"
#include "audistill/matrix.hpp"
#include "audistill/models.hpp"
#include "audistill/reconstruct.hpp"
#include "audistill/rng.hpp"
