#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "preflab/world.hpp"

namespace preflab {

enum class Provenance { image_weakened, error_injected_rules, error_injected_llm, self_generated };

inline const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::image_weakened: return "image_weakened";
    case Provenance::error_injected_rules: return "error_injected_rules";
    case Provenance::error_injected_llm: return "error_injected_llm";
    case Provenance::self_generated: return "self_generated";
  }
  throw std::logic_error("unknown provenance");
}

inline Provenance provenance_from_name(const std::string& s) {
  if (s == "image_weakened") return Provenance::image_weakened;
  if (s == "error_injected_rules") return Provenance::error_injected_rules;
  if (s == "error_injected_llm") return Provenance::error_injected_llm;
  if (s == "self_generated") return Provenance::self_generated;
  throw std::invalid_argument("unknown provenance: '" + s + "'");
}

// One preference record: image, query, two distinct terminated responses and
// the binary signal p (p=1 means r1 is preferred over r2).
struct PreferenceTuple {
  ImageEmbedding image;
  TokenSeq query;
  TokenSeq r1;
  TokenSeq r2;
  int p = 1;
  Provenance provenance = Provenance::image_weakened;
  int noise_step = 0;       // meta: diffusion step used for the negative
  std::uint64_t seed = 0;   // meta: item seed

  const TokenSeq& winner() const { return p == 1 ? r1 : r2; }
  const TokenSeq& loser() const { return p == 1 ? r2 : r1; }
};

}  // namespace preflab
