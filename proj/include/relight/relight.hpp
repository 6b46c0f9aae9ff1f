#pragma once

#include "relight/archive.hpp"
#include "relight/augment.hpp"
#include "relight/autograd.hpp"
#include "relight/eval.hpp"
#include "relight/image.hpp"
#include "relight/loss.hpp"
#include "relight/manifest.hpp"
#include "relight/model.hpp"
#include "relight/params.hpp"
#include "relight/probe.hpp"
#include "relight/random.hpp"
#include "relight/scene.hpp"
#include "relight/tensor.hpp"
#include "relight/trainer.hpp"
#include "relight/vae.hpp"
