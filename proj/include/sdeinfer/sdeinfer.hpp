#ifndef SDEINFER_SDEINFER_HPP
#define SDEINFER_SDEINFER_HPP

// Everything in one include.
#include "sdeinfer/errors.hpp"
#include "sdeinfer/linalg.hpp"
#include "sdeinfer/rng.hpp"
#include "sdeinfer/parallel.hpp"
#include "sdeinfer/sde.hpp"
#include "sdeinfer/bridge.hpp"
#include "sdeinfer/innovations.hpp"
#include "sdeinfer/importance.hpp"
#include "sdeinfer/particle_filter.hpp"
#include "sdeinfer/prior.hpp"
#include "sdeinfer/models.hpp"
#include "sdeinfer/samplers.hpp"
#include "sdeinfer/lna.hpp"
#include "sdeinfer/diagnostics.hpp"
#include "sdeinfer/tuning.hpp"
#include "sdeinfer/experiment.hpp"

#endif  // SDEINFER_SDEINFER_HPP
