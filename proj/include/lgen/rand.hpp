#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace lgen {

// mt19937_64 with explicit output transforms. The standard pins the raw
// generator but not the library distributions, so owning the transforms keeps
// seeded runs bit-identical across toolchains.
class Rand {
public:
    explicit Rand(uint64_t seed) : gen_(seed) {}

    // [0, 1)
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // standard normal via Box-Muller, second value cached
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = static_cast<double>((gen_() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * M_PI * u2);
        have_spare_ = true;
        return r * std::cos(2.0 * M_PI * u2);
    }

    // uniform integer in [0, n)
    int below(int n) { return static_cast<int>(gen_() % static_cast<uint64_t>(n)); }

    // uniform integer in [lo, hi]
    int between(int lo, int hi) { return lo + below(hi - lo + 1); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[static_cast<size_t>(below(static_cast<int>(i)))]);
        }
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace lgen
