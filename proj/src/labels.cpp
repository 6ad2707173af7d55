#include "scatterbench/labels.hpp"

namespace scatterbench {

std::string_view to_string(HairType t) {
  switch (t) {
    case HairType::A: return "A";
    case HairType::B: return "B";
    case HairType::MAMI: return "MAMI";
    case HairType::MINAYO: return "MINAYO";
  }
  return "?";
}

std::string_view to_string(Condition c) {
  switch (c) {
    case Condition::dry: return "dry";
    case Condition::shampoo: return "shampoo";
    case Condition::cream: return "cream";
  }
  return "?";
}

std::optional<HairType> parse_hair_type(std::string_view s) {
  for (HairType t : kHairTypes) {
    if (to_string(t) == s) return t;
  }
  return std::nullopt;
}

std::optional<Condition> parse_condition(std::string_view s) {
  for (Condition c : kConditions) {
    if (to_string(c) == s) return c;
  }
  return std::nullopt;
}

}  // namespace scatterbench
