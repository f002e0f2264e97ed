#ifndef BILEVEL_BILEVEL_HPP
#define BILEVEL_BILEVEL_HPP

#include "bilevel/common.hpp"
#include "bilevel/experiment.hpp"
#include "bilevel/gs.hpp"
#include "bilevel/io.hpp"
#include "bilevel/lower.hpp"
#include "bilevel/parallel.hpp"
#include "bilevel/poly.hpp"
#include "bilevel/problems.hpp"
#include "bilevel/qp.hpp"
#include "bilevel/rng.hpp"
#include "bilevel/sensitivity.hpp"
#include "bilevel/sqpgs.hpp"

#endif  // BILEVEL_BILEVEL_HPP
