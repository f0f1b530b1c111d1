#pragma once

#include "knnseq/bench.hpp"
#include "knnseq/binio.hpp"
#include "knnseq/config.hpp"
#include "knnseq/corevec.hpp"
#include "knnseq/datastore.hpp"
#include "knnseq/errors.hpp"
#include "knnseq/generate.hpp"
#include "knnseq/ivf.hpp"
#include "knnseq/pq.hpp"
#include "knnseq/subset.hpp"
#include "knnseq/transform.hpp"
