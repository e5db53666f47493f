#pragma once

#include <string>
#include <vector>

namespace ilql {

// Built-in list of common five-letter words backing gen-vocab; distinct, lowercase.
const std::vector<std::string>& builtin_words();

}  // namespace ilql
