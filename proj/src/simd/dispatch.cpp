#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "dstn/simd/kernels.hpp"

namespace dstn::simd {

#ifndef DSTN_HAVE_AVX2
const KernelTable* avx2_kernels() { return nullptr; }
#endif

bool cpu_has_avx2_fma() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa parse_isa(std::string_view name) {
  if (name == "scalar") return Isa::scalar;
  if (name == "avx2") return Isa::avx2;
  throw std::invalid_argument("unknown SIMD variant '" + std::string(name) + "'");
}

namespace {

const KernelTable* resolve(Isa isa) {
  if (isa == Isa::scalar) return &scalar_kernels();
  const KernelTable* t = avx2_kernels();
  if (t == nullptr || !cpu_has_avx2_fma()) return nullptr;
  return t;
}

const KernelTable* pick_default() {
  if (const char* env = std::getenv("DSTN_SIMD"); env != nullptr && *env != '\0') {
    const KernelTable* t = resolve(parse_isa(env));
    if (t == nullptr) throw std::runtime_error(std::string("DSTN_SIMD=") + env + " unavailable");
    return t;
  }
  if (const KernelTable* t = resolve(Isa::avx2)) return t;
  return &scalar_kernels();
}

std::atomic<const KernelTable*>& slot() {
  static std::atomic<const KernelTable*> table{pick_default()};
  return table;
}

}  // namespace

const KernelTable& active() { return *slot().load(std::memory_order_acquire); }

void select(Isa isa) {
  const KernelTable* t = resolve(isa);
  if (t == nullptr) throw std::runtime_error("requested SIMD variant is unavailable");
  slot().store(t, std::memory_order_release);
}

}  // namespace dstn::simd
