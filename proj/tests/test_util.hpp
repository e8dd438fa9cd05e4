#pragma once

#include <cstdint>
#include <vector>

#include "atnf/fixtures.hpp"

namespace testutil {

// Small random fixture: L layers, H heads, head width 8.
inline atnf::fixture_spec small_spec(std::uint64_t seed, std::size_t layers = 2, std::size_t heads = 2,
                                     atnf::prompt_layout layout = {2, 4, 3}) {
  atnf::fixture_spec s;
  s.seed = seed;
  s.config = {layers, heads, heads * 8, 8, 32, 32, 64, 10000};
  s.layout = layout;
  return s;
}

// Prompt plus `extra` text tokens.
inline std::vector<atnf::token_id> tokens_with_response(const atnf::fixture_spec& s, std::uint64_t seed,
                                                        std::size_t extra) {
  auto t = atnf::fixture_prompt(s, seed);
  atnf::fixture_rng rng(seed + 17);
  const atnf::vocab_partition vp{s.config.vocab_size};
  for (std::size_t i = 0; i < extra; ++i)
    t.push_back(static_cast<atnf::token_id>(vp.text().begin + rng.below(vp.text().size())));
  return t;
}

}  // namespace testutil
