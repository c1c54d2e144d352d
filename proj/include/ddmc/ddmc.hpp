#pragma once

#include "ddmc/error.hpp"
#include "ddmc/tensor.hpp"
#include "ddmc/rng.hpp"
#include "ddmc/autodiff.hpp"
#include "ddmc/ops.hpp"
#include "ddmc/layers.hpp"
#include "ddmc/params.hpp"
#include "ddmc/adam.hpp"
#include "ddmc/gradcheck.hpp"
#include "ddmc/fourier.hpp"
#include "ddmc/acquisition.hpp"
#include "ddmc/geometry.hpp"
#include "ddmc/datagen.hpp"
#include "ddmc/models.hpp"
#include "ddmc/objectives.hpp"
#include "ddmc/evalkit.hpp"
#include "ddmc/pipeline.hpp"
