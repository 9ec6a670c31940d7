#pragma once

#include "biaten/autograd.hpp"
#include "biaten/baselines.hpp"
#include "biaten/bi_aten.hpp"
#include "biaten/databank.hpp"
#include "biaten/errors.hpp"
#include "biaten/gradcheck.hpp"
#include "biaten/numerics.hpp"
#include "biaten/objectives.hpp"
#include "biaten/pseudo_labeler.hpp"
#include "biaten/report.hpp"
#include "biaten/rng.hpp"
#include "biaten/source_heads.hpp"
#include "biaten/synth.hpp"
#include "biaten/trainer.hpp"
