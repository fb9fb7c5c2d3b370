#pragma once

// Umbrella header.

#include "visatronic/decoder.hpp"
#include "visatronic/encoders.hpp"
#include "visatronic/error.hpp"
#include "visatronic/grid.hpp"
#include "visatronic/meldsp.hpp"
#include "visatronic/optim.hpp"
#include "visatronic/sampler.hpp"
#include "visatronic/seqlayout.hpp"
#include "visatronic/synthdata.hpp"
#include "visatronic/tensor.hpp"
#include "visatronic/tensorfile.hpp"
#include "visatronic/timesync.hpp"
#include "visatronic/tokenizers.hpp"
#include "visatronic/training.hpp"
#include "visatronic/wav.hpp"
