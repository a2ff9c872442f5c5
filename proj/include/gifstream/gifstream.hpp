#pragma once

// Umbrella header for the GIFStream codec library.

#include "gifstream/common.hpp"
#include "gifstream/container.hpp"
#include "gifstream/deform.hpp"
#include "gifstream/entropy.hpp"
#include "gifstream/model.hpp"
#include "gifstream/nn.hpp"
#include "gifstream/rans.hpp"
#include "gifstream/reorg.hpp"
