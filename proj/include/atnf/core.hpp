#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace atnf {

using real = double;
using token_id = std::int32_t;

class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

#define ATNF_DEFINE_ERROR(name)                                  \
  class name : public error {                                    \
   public:                                                       \
    using error::error;                                          \
    const char* kind() const noexcept override { return #name; } \
  }

ATNF_DEFINE_ERROR(dimension_error);
ATNF_DEFINE_ERROR(contract_error);
ATNF_DEFINE_ERROR(config_error);
ATNF_DEFINE_ERROR(format_error);
ATNF_DEFINE_ERROR(missing_data_error);

#undef ATNF_DEFINE_ERROR

// Half-open interval [begin, end) of sequence positions.
struct index_range {
  std::size_t begin = 0;
  std::size_t end = 0;

  constexpr std::size_t size() const noexcept { return end > begin ? end - begin : 0; }
  constexpr bool empty() const noexcept { return end <= begin; }
  constexpr bool contains(std::size_t i) const noexcept { return i >= begin && i < end; }

  friend constexpr bool operator==(const index_range&, const index_range&) = default;
};

}  // namespace atnf
