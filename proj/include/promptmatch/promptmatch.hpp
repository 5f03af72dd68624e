#pragma once

#include "promptmatch/backend.hpp"
#include "promptmatch/config.hpp"
#include "promptmatch/corpus.hpp"
#include "promptmatch/environment.hpp"
#include "promptmatch/error.hpp"
#include "promptmatch/http_backend.hpp"
#include "promptmatch/policy.hpp"
#include "promptmatch/reward.hpp"
#include "promptmatch/rng.hpp"
#include "promptmatch/synthetic.hpp"
#include "promptmatch/trainer.hpp"
