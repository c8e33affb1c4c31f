#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace dmr {

// ---------------------------------------------------------------------------
// Error taxonomy. The CLI maps these onto exit codes (1 config, 2 convergence,
// 3 invariant violation).
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

struct InvariantViolation : Error {
    using Error::Error;
};

/// Boundary roots cross (the lower boundary's root lies above the upper one).
struct InfeasibleBoundaries : InvariantViolation {
    using InvariantViolation::InvariantViolation;
};

/// Terminal anchor violates l(T,a) <= 0 <= r(T,a).
struct TerminalConditionError : InvariantViolation {
    using InvariantViolation::InvariantViolation;
};

struct RegressionError : NumericError {
    using NumericError::NumericError;
};

struct ConvergenceFailure : Error {
    using Error::Error;
};

struct OracleUnavailable : Error {
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Thread count. Parallel loops only ever write disjoint outputs, so the value
// never changes results.
// ---------------------------------------------------------------------------

namespace detail {
inline std::atomic<unsigned>& thread_count_ref() {
    static std::atomic<unsigned> n{1};
    return n;
}
}  // namespace detail

inline void set_thread_count(unsigned n) { detail::thread_count_ref() = std::max(1u, n); }
inline unsigned thread_count() { return detail::thread_count_ref(); }

/// Runs fn(i) for i in [0, n). Each index must write only its own outputs.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(thread_count(), n));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::atomic<bool> failed{false};
    auto work = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n || failed.load()) return;
            try {
                fn(i);
            } catch (...) {
                if (!failed.exchange(true)) failure = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (unsigned w = 1; w < workers; ++w) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------------------
// Fixed-order pairwise summation. The tree shape depends only on n, so every
// mean in the library is reproducible bit for bit.
// ---------------------------------------------------------------------------

namespace detail {
constexpr std::size_t kPairwiseLeaf = 16;

template <class F>
double pairwise_sum_range(std::size_t lo, std::size_t hi, const F& f) {
    if (hi - lo <= kPairwiseLeaf) {
        double acc = 0.0;
        for (std::size_t i = lo; i < hi; ++i) acc += f(i);
        return acc;
    }
    const std::size_t mid = lo + (hi - lo) / 2;
    return pairwise_sum_range(lo, mid, f) + pairwise_sum_range(mid, hi, f);
}
}  // namespace detail

/// Sum of f(0) + ... + f(n-1) using a fixed binary tree.
template <class F>
double pairwise_sum(std::size_t n, const F& f) {
    return detail::pairwise_sum_range(0, n, f);
}

inline double pairwise_sum(std::span<const double> xs) {
    return pairwise_sum(xs.size(), [xs](std::size_t i) { return xs[i]; });
}

inline double pairwise_mean(std::span<const double> xs) {
    if (xs.empty()) throw NumericError("mean of an empty sample");
    return pairwise_sum(xs) / static_cast<double>(xs.size());
}

template <class F>
double pairwise_mean(std::size_t n, const F& f) {
    if (n == 0) throw NumericError("mean of an empty sample");
    return pairwise_sum(n, f) / static_cast<double>(n);
}

inline double positive_part(double x) { return x > 0.0 ? x : 0.0; }
inline double negative_part(double x) { return x < 0.0 ? -x : 0.0; }

// ---------------------------------------------------------------------------
// PathArray: per-path values on every grid time. Stored time-major because
// almost every kernel (regression, induced boundaries, means) works one time
// column at a time.
// ---------------------------------------------------------------------------

class PathArray {
public:
    PathArray() = default;
    PathArray(std::size_t paths, std::size_t times, double fill = 0.0)
        : paths_(paths), times_(times), data_(paths * times, fill) {}

    std::size_t paths() const { return paths_; }
    std::size_t times() const { return times_; }

    double& operator()(std::size_t m, std::size_t k) { return data_[k * paths_ + m]; }
    double operator()(std::size_t m, std::size_t k) const { return data_[k * paths_ + m]; }

    std::span<double> column(std::size_t k) { return {data_.data() + k * paths_, paths_}; }
    std::span<const double> column(std::size_t k) const {
        return {data_.data() + k * paths_, paths_};
    }

    double column_mean(std::size_t k) const { return pairwise_mean(column(k)); }

    std::vector<double> column_means() const {
        std::vector<double> out(times_);
        for (std::size_t k = 0; k < times_; ++k) out[k] = column_mean(k);
        return out;
    }

    const std::vector<double>& raw() const { return data_; }

    friend bool operator==(const PathArray&, const PathArray&) = default;

private:
    std::size_t paths_ = 0;
    std::size_t times_ = 0;
    std::vector<double> data_;
};

inline void require_finite(std::span<const double> xs, const char* what) {
    for (double x : xs)
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite value in ") + what);
}

}  // namespace dmr
