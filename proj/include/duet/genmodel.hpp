/**
 * @file genmodel.hpp
 * @brief Umbrella header for the artificial partner.
 */

#pragma once

#include "duet/genmodel/checkpoint.hpp"
#include "duet/genmodel/markov.hpp"
#include "duet/genmodel/model.hpp"
#include "duet/genmodel/partner.hpp"
#include "duet/genmodel/rng.hpp"
#include "duet/genmodel/train.hpp"
#include "duet/genmodel/vae.hpp"
