#include "xlst/rng.hpp"

#include <sstream>

#include "xlst/error.hpp"

namespace xlst {

std::string Rng::save_state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::load_state(const std::string& state) {
  std::istringstream is(state);
  is >> engine_;
  if (!is) throw StateError("rng: malformed engine state");
}

}  // namespace xlst
