#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace acflow::cli {

inline constexpr int exit_ok = 0;
inline constexpr int exit_runtime = 1;
inline constexpr int exit_usage = 2;

// Runs one command line (args excludes the program name) and returns the
// process exit code.  Usage problems print to err and return 2; failures
// while running print "acflow <command>: error (<kind>): <message>" and
// return 1.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

// One `key = value` per line, '#' starts a comment, '-' and '_' are
// interchangeable in keys.  Throws ParseError on malformed lines and
// repeated keys.
std::map<std::string, std::string> parse_config(std::string_view text);

// Lowercase hex SHA-1 of the bytes.
std::string sha1_hex(std::string_view bytes);
// Hash git assigns to a blob with these contents: sha1("blob <len>\0" + bytes).
std::string git_blob_hash(std::string_view bytes);

// Static SVG figures.  scatter2d plots (xs[i], ys[i]); hist draws a
// histogram of xs with the given bin count.
std::string svg_scatter(const std::vector<double>& xs, const std::vector<double>& ys,
                        std::string_view x_label, std::string_view y_label);
std::string svg_histogram(const std::vector<double>& xs, std::size_t bins, std::string_view label);

}  // namespace acflow::cli
