#pragma once

#include "mthd/error.hpp"
#include "mthd/numerics.hpp"
#include "mthd/textdata.hpp"
#include "mthd/seq2seq.hpp"
#include "mthd/decoding.hpp"
#include "mthd/adaptation.hpp"
#include "mthd/server.hpp"
#include "mthd/simulator.hpp"
