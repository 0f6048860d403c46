#pragma once

// JSON-Lines dataset files. Line 1 is a header
//   {"format":"gazekit-ds/1","config":{...},"stats":{...}}
// and every following line is one Sample.

#include <filesystem>
#include <iosfwd>
#include <string>

#include "gazekit/eyesim.hpp"
#include "vendor_json.hpp"

namespace gazekit::io {

inline constexpr const char* kDatasetFormat = "gazekit-ds/1";

using Json = nlohmann::ordered_json;

Json to_json(const eyesim::SimConfig& cfg);
/// Missing keys keep their defaults; `required` keys must be present.
eyesim::SimConfig sim_config_from_json(const Json& j, std::initializer_list<const char*> required = {});

Json to_json(const eyesim::Sample& s);
eyesim::Sample sample_from_json(const Json& j);

void write_dataset(std::ostream& os, const eyesim::Dataset& ds);
void write_dataset(const std::filesystem::path& path, const eyesim::Dataset& ds);
/// Throws IoError if unreadable, FormatError on a bad header or line.
eyesim::Dataset read_dataset(const std::filesystem::path& path);

/// Parses a JSON document; parse errors are rethrown as FormatError with the
/// line and column of the failure.
Json parse_json_text(const std::string& text, const std::string& origin);
Json read_json_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace gazekit::io
