#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace cedit {

enum class ErrorKind {
    invalid_argument,  // contract violations, bad shapes for the situation
    dimension,         // tensor shape mismatch
    numeric,           // NaN/Inf detected at an op boundary
    capacity,          // infeasible generation sizes
    format,            // malformed file / manifest
    io,                // filesystem failure
    prerequisite,      // required upstream artifact missing
    divergence,        // training produced a non-finite loss
    localization,      // convergence produced an empty target set
    gate,              // entrenchment gate unmet within budget
    unsupported,       // operation not defined for this input kind
    internal,
};

const char* error_kind_name(ErrorKind k);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind k, const std::string& msg) {
    throw Error(k, msg);
}

// Deterministic RNG. mt19937_64 plus hand-rolled distributions so streams are
// bit-identical across standard libraries (std::normal_distribution is not).
class Rng {
public:
    explicit Rng(uint64_t seed);

    uint64_t u64();
    double uniform();        // [0, 1)
    double normal();         // standard normal, Box-Muller
    int uniform_int(int n);  // [0, n), rejection sampled

    // Derive an independent deterministic substream.
    Rng fork(uint64_t salt) const;
    uint64_t seed() const { return seed_; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(uniform_int(i + 1))]);
        }
    }

private:
    uint64_t seed_;
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

uint64_t mix_seed(uint64_t a, uint64_t b);

// SHA-256, lowercase hex digest.
std::string sha256_hex(const void* data, size_t n);
std::string sha256_hex(const std::string& s);
std::string sha256_file_hex(const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace cedit
