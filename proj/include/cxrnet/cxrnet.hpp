#pragma once

#include "cxrnet/checkpoint.hpp"
#include "cxrnet/config.hpp"
#include "cxrnet/dataset.hpp"
#include "cxrnet/error.hpp"
#include "cxrnet/explain.hpp"
#include "cxrnet/imaging.hpp"
#include "cxrnet/layers.hpp"
#include "cxrnet/metrics.hpp"
#include "cxrnet/model.hpp"
#include "cxrnet/optim.hpp"
#include "cxrnet/rng.hpp"
#include "cxrnet/tensor.hpp"
#include "cxrnet/train.hpp"
