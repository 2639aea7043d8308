#pragma once

#include "hnervf/errors.hpp"
#include "hnervf/variance_function.hpp"
#include "hnervf/dataset.hpp"
#include "hnervf/geometry.hpp"
#include "hnervf/estimation.hpp"
#include "hnervf/prediction.hpp"
#include "hnervf/simulation.hpp"
