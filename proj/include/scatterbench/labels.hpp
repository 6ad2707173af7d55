#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace scatterbench {

// Closed label vocabularies. Heads and hair types share tokens: each
// mannequin head carries one hair type.
enum class HairType { A, B, MAMI, MINAYO };
enum class Condition { dry, shampoo, cream };

inline constexpr std::array<HairType, 4> kHairTypes = {HairType::A, HairType::B, HairType::MAMI,
                                                       HairType::MINAYO};
inline constexpr std::array<Condition, 3> kConditions = {Condition::dry, Condition::shampoo,
                                                         Condition::cream};

std::string_view to_string(HairType t);
std::string_view to_string(Condition c);
std::optional<HairType> parse_hair_type(std::string_view s);
std::optional<Condition> parse_condition(std::string_view s);

inline int index_of(HairType t) { return static_cast<int>(t); }
inline int index_of(Condition c) { return static_cast<int>(c); }

}  // namespace scatterbench
