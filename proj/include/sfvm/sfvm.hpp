// Copyright (c) sfvm contributors.
// SPDX-License-Identifier: MIT
#pragma once

// Everything in one include.

#include "sfvm/action.hpp"
#include "sfvm/arg_snapshot.hpp"
#include "sfvm/assembler.hpp"
#include "sfvm/bundle.hpp"
#include "sfvm/bytes.hpp"
#include "sfvm/context.hpp"
#include "sfvm/engine.hpp"
#include "sfvm/isa.hpp"
#include "sfvm/maps.hpp"
#include "sfvm/policy.hpp"
#include "sfvm/profiles.hpp"
#include "sfvm/program.hpp"
#include "sfvm/report.hpp"
#include "sfvm/scenario.hpp"
#include "sfvm/simulator.hpp"
#include "sfvm/syscalls.hpp"
#include "sfvm/trace.hpp"
#include "sfvm/user_memory.hpp"
#include "sfvm/verifier.hpp"
#include "sfvm/vm.hpp"
