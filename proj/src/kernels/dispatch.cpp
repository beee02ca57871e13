#include "rematch/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <string>
#include <type_traits>

namespace rematch::kernels {

#ifdef REMATCH_HAVE_AVX2
const KernelTable<float>* avx2_table_f32();
const KernelTable<double>* avx2_table_f64();
#endif

std::string_view isa_name(Isa isa) {
    switch (isa) {
        case Isa::scalar: return "scalar";
        case Isa::avx2: return "avx2";
    }
    return "unknown";
}

template <class T>
const KernelTable<T>* avx2_kernels() {
#ifdef REMATCH_HAVE_AVX2
    if constexpr (std::is_same_v<T, float>) {
        return avx2_table_f32();
    } else {
        return avx2_table_f64();
    }
#else
    return nullptr;
#endif
}

template const KernelTable<float>* avx2_kernels<float>();
template const KernelTable<double>* avx2_kernels<double>();

bool cpu_supports_avx2() {
#if defined(REMATCH_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

namespace {

Isa detect() {
    if (const char* env = std::getenv("REMATCH_ISA"); env != nullptr && std::string(env) == "scalar") {
        return Isa::scalar;
    }
    return cpu_supports_avx2() ? Isa::avx2 : Isa::scalar;
}

std::atomic<Isa>& current() {
    static std::atomic<Isa> isa{detect()};
    return isa;
}

}  // namespace

Isa active_isa() { return current().load(std::memory_order_relaxed); }

Isa select_isa(Isa requested) {
    const Isa chosen = (requested == Isa::avx2 && cpu_supports_avx2()) ? Isa::avx2 : Isa::scalar;
    current().store(chosen, std::memory_order_relaxed);
    return chosen;
}

template <class T>
const KernelTable<T>& active() {
    if (active_isa() == Isa::avx2) {
        if (const auto* table = avx2_kernels<T>()) return *table;
    }
    return scalar_kernels<T>();
}

template const KernelTable<float>& active<float>();
template const KernelTable<double>& active<double>();

}  // namespace rematch::kernels
