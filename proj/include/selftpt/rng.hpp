#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace selftpt {

// Derives a reproducible child seed from an experiment seed and a stream
// name, so that e.g. world construction and batch sampling draw from
// independent generators that do not shift when an unrelated stage changes.
std::uint64_t mix_seed(std::uint64_t seed, std::string_view stream);

// Generator for one named substream of an experiment seed.
std::mt19937_64 substream(std::uint64_t seed, std::string_view stream);

}  // namespace selftpt
