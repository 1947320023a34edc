#pragma once

#include "ncalab/checkpoint.hpp"
#include "ncalab/dataset.hpp"
#include "ncalab/error.hpp"
#include "ncalab/experiments.hpp"
#include "ncalab/instance.hpp"
#include "ncalab/losses.hpp"
#include "ncalab/numeric.hpp"
#include "ncalab/oracle.hpp"
#include "ncalab/policy.hpp"
#include "ncalab/random.hpp"
#include "ncalab/report.hpp"
#include "ncalab/reward.hpp"
#include "ncalab/trainer.hpp"
