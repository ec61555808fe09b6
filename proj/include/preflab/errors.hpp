#pragma once

#include <stdexcept>
#include <string>

namespace preflab {

// Config file failed schema validation. CLI exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// A command needs an artifact an earlier stage did not produce. Exit code 3.
struct MissingArtifactError : std::runtime_error {
  explicit MissingArtifactError(const std::string& file)
      : std::runtime_error("missing artifact: " + file + " (run the producing stage first)"), missing_file(file) {}
  std::string missing_file;
};

// Training loss blew past the divergence guard. Exit code 4.
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

// Chat endpoint failed after retries. Exit code 5.
struct ChatError : std::runtime_error {
  ChatError(int status_, const std::string& body_excerpt_)
      : std::runtime_error("chat endpoint error, status " + std::to_string(status_) +
                           (body_excerpt_.empty() ? "" : ": " + body_excerpt_)),
        status(status_),
        body_excerpt(body_excerpt_) {}
  int status;
  std::string body_excerpt;
};

// Distinct from ChatError so callers can tell a slow endpoint from a broken one.
struct ChatTimeoutError : std::runtime_error {
  explicit ChatTimeoutError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace preflab
