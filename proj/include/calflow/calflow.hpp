#pragma once

#include "calflow/error.hpp"
#include "calflow/image.hpp"
#include "calflow/png_io.hpp"
#include "calflow/histogram.hpp"
#include "calflow/transport.hpp"
#include "calflow/nn.hpp"
#include "calflow/flow.hpp"
#include "calflow/losses.hpp"
#include "calflow/optim.hpp"
#include "calflow/train.hpp"
#include "calflow/metrics.hpp"
#include "calflow/dataset.hpp"
