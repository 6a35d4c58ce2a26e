#pragma once

#include "mmvpr/atrec.hpp"
#include "mmvpr/cammf.hpp"
#include "mmvpr/config.hpp"
#include "mmvpr/descriptor.hpp"
#include "mmvpr/encoder.hpp"
#include "mmvpr/errors.hpp"
#include "mmvpr/gradaudit.hpp"
#include "mmvpr/metric.hpp"
#include "mmvpr/model.hpp"
#include "mmvpr/retrieval.hpp"
#include "mmvpr/rng.hpp"
#include "mmvpr/scenario.hpp"
#include "mmvpr/seqcore.hpp"
