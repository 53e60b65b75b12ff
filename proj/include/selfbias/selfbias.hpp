#pragma once

// Umbrella header. Pull in individual headers instead when the HTTP
// dependency is unwanted.

#include "selfbias/config.hpp"
#include "selfbias/corpus.hpp"
#include "selfbias/errors.hpp"
#include "selfbias/judge.hpp"
#include "selfbias/judge_client.hpp"
#include "selfbias/metrics.hpp"
#include "selfbias/perplexity.hpp"
#include "selfbias/perplexity_client.hpp"
#include "selfbias/prompt.hpp"
#include "selfbias/report.hpp"
#include "selfbias/rng.hpp"
#include "selfbias/simulation.hpp"
#include "selfbias/transport.hpp"
#include "selfbias/version.hpp"
