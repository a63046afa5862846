#pragma once

#include "migc/consistency.hpp"
#include "migc/diffusion.hpp"
#include "migc/dual.hpp"
#include "migc/encoders.hpp"
#include "migc/errors.hpp"
#include "migc/eval.hpp"
#include "migc/image_io.hpp"
#include "migc/io.hpp"
#include "migc/json_io.hpp"
#include "migc/rng.hpp"
#include "migc/scene.hpp"
#include "migc/session.hpp"
#include "migc/shading.hpp"
#include "migc/tensor.hpp"
#include "migc/training.hpp"
