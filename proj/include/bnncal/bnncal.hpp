#pragma once

#include "bnncal/adam.hpp"
#include "bnncal/calibration.hpp"
#include "bnncal/data.hpp"
#include "bnncal/error.hpp"
#include "bnncal/experiment.hpp"
#include "bnncal/metrics.hpp"
#include "bnncal/network.hpp"
#include "bnncal/random.hpp"
#include "bnncal/stats.hpp"
#include "bnncal/training.hpp"
#include "bnncal/variational.hpp"
