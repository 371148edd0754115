#include "circuitscope/common.hpp"
