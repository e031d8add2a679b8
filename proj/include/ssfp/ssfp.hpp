#pragma once

#include "ssfp/error.hpp"
#include "ssfp/rng.hpp"
#include "ssfp/tensor.hpp"
#include "ssfp/nn.hpp"
#include "ssfp/model_io.hpp"
#include "ssfp/sensitivity.hpp"
#include "ssfp/samplegen.hpp"
#include "ssfp/manc.hpp"
#include "ssfp/fingerprint.hpp"
#include "ssfp/data.hpp"
#include "ssfp/attacks.hpp"
#include "ssfp/serving.hpp"
#include "ssfp/bench.hpp"
