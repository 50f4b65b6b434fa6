#pragma once

// Convenience include for the whole library.

#include "metricforge/distmatrix_io.hpp"
#include "metricforge/embedding.hpp"
#include "metricforge/errors.hpp"
#include "metricforge/evalkit.hpp"
#include "metricforge/gradcheck.hpp"
#include "metricforge/losses.hpp"
#include "metricforge/matrix.hpp"
#include "metricforge/model.hpp"
#include "metricforge/rng.hpp"
#include "metricforge/sampler.hpp"
#include "metricforge/synthdata.hpp"
#include "metricforge/trainer.hpp"
