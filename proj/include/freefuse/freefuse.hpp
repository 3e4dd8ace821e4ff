#pragma once

#include "freefuse/ablation.hpp"
#include "freefuse/attnmap.hpp"
#include "freefuse/commands.hpp"
#include "freefuse/config.hpp"
#include "freefuse/error.hpp"
#include "freefuse/fixtures.hpp"
#include "freefuse/lora.hpp"
#include "freefuse/superpixel.hpp"
#include "freefuse/tensor.hpp"
#include "freefuse/tensor_io.hpp"
#include "freefuse/text.hpp"
#include "freefuse/toydit.hpp"
