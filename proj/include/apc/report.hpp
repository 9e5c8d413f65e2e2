#pragma once
// Report serialization: lossless JSON round-trip plus markdown and CSV views.

#include <iosfwd>
#include <string>

#include "apc/core.hpp"

namespace apc {

enum class ReportFormat { json, markdown, csv };

ReportFormat report_format_from_string(const std::string& name);  // throws ValidationError

// JSON text that from_json_text() parses back into an equal report.
std::string report_to_json_text(const ApcReport& report);
ApcReport report_from_json_text(const std::string& text);

void write_report(std::ostream& out, const ApcReport& report, ReportFormat format);

}  // namespace apc
