#pragma once

#include "mdst/config.hpp"
#include "mdst/data.hpp"
#include "mdst/errors.hpp"
#include "mdst/events.hpp"
#include "mdst/fusion.hpp"
#include "mdst/gradcheck.hpp"
#include "mdst/gradsuite.hpp"
#include "mdst/losses.hpp"
#include "mdst/model.hpp"
#include "mdst/nn.hpp"
#include "mdst/ops.hpp"
#include "mdst/random.hpp"
#include "mdst/semantic.hpp"
#include "mdst/serialize.hpp"
#include "mdst/spiking.hpp"
#include "mdst/tensor.hpp"
#include "mdst/train.hpp"
