#pragma once

#include <string>
#include <string_view>

#include <json.hpp>

namespace ntklab {

/// Lower-case hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

/// Hash of the compact dump of `j`. Object keys are stored sorted, so the
/// result does not depend on insertion order.
std::string content_hash(const nlohmann::json& j);

}  // namespace ntklab
