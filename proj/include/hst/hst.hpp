#pragma once

#include "hst/alloc.hpp"
#include "hst/checkpoint.hpp"
#include "hst/config.hpp"
#include "hst/data.hpp"
#include "hst/diagnostics.hpp"
#include "hst/model.hpp"
#include "hst/trainer.hpp"
