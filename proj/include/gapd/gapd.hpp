#pragma once

#include "gapd/kb_store.hpp"
#include "gapd/action_lang.hpp"
#include "gapd/executor.hpp"
#include "gapd/kb_generator.hpp"
#include "gapd/anchor_match.hpp"
#include "gapd/policy.hpp"
#include "gapd/featurizer.hpp"
#include "gapd/rollout.hpp"
#include "gapd/trainer.hpp"
#include "gapd/harness.hpp"
