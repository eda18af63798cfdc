#pragma once

#include "graphem/bootstrap.hpp"
#include "graphem/data.hpp"
#include "graphem/em.hpp"
#include "graphem/error.hpp"
#include "graphem/experiments.hpp"
#include "graphem/geodesy.hpp"
#include "graphem/glasso.hpp"
#include "graphem/gmrf.hpp"
#include "graphem/graph.hpp"
#include "graphem/io.hpp"
#include "graphem/linalg.hpp"
#include "graphem/neighgraph.hpp"
#include "graphem/parallel.hpp"
#include "graphem/random.hpp"
