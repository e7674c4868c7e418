// SPDX-License-Identifier: Apache-2.0
#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "ulab/kernels.hpp"

namespace ulab::kernels {

bool avx2_compiled();

namespace {

const Table* pick_default() {
  if (const char* env = std::getenv("ULAB_ISA")) {
    const std::string v(env);
    if (v == "scalar") return &scalar_table();
    if (v == "avx2" && cpu_supports(Isa::avx2)) return &avx2_table();
  }
  return cpu_supports(Isa::avx2) ? &avx2_table() : &scalar_table();
}

std::atomic<const Table*>& slot() {
  static std::atomic<const Table*> current{pick_default()};
  return current;
}

}  // namespace

bool cpu_supports(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
#if defined(__x86_64__) || defined(_M_X64)
      return avx2_compiled() && __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
  }
  return false;
}

const Table& active() { return *slot().load(std::memory_order_relaxed); }

Isa active_isa() { return active().isa; }

void select(Isa isa) {
  if (!cpu_supports(isa)) throw std::runtime_error("kernel ISA not supported on this CPU");
  slot().store(isa == Isa::scalar ? &scalar_table() : &avx2_table());
}

std::string_view isa_name(Isa isa) { return isa == Isa::scalar ? "scalar" : "avx2"; }

}  // namespace ulab::kernels
