#include "preflab/llm_client.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <random>
#include <stdexcept>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "preflab/datagen.hpp"
#include "preflab/errors.hpp"

namespace preflab {

namespace {

struct ParsedUrl {
  std::string host_port;  // scheme://host:port
  std::string path_prefix;
};

ParsedUrl split_base_url(const std::string& base_url) {
  const auto scheme_end = base_url.find("://");
  if (scheme_end == std::string::npos) {
    throw std::invalid_argument("base_url must include a scheme, got '" + base_url + "'");
  }
  const auto path_start = base_url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {base_url, ""};
  std::string prefix = base_url.substr(path_start);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  return {base_url.substr(0, path_start), prefix};
}

double jittered_backoff_seconds(double base, int attempt) {
  // base * 2^attempt, scaled by a uniform factor in [1.0, 1.5).
  static thread_local std::mt19937_64 jitter_engine(
      static_cast<std::uint64_t>(std::chrono::steady_clock::now().time_since_epoch().count()));
  const double u = static_cast<double>(jitter_engine() >> 11) * 0x1.0p-53;
  return base * std::pow(2.0, attempt) * (1.0 + 0.5 * u);
}

}  // namespace

ChatResult chat_complete(const EndpointConfig& config, const std::vector<ChatMessage>& messages) {
  if (messages.empty()) throw std::invalid_argument("chat_complete: messages must be nonempty");
  if (!(config.timeout_seconds > 0.0)) throw std::invalid_argument("chat_complete: timeout must be positive");
  if (config.max_retries < 0) throw std::invalid_argument("chat_complete: max_retries must be >= 0");

  const ParsedUrl url = split_base_url(config.base_url);
  httplib::Client client(url.host_port);
  const auto timeout = std::chrono::microseconds(static_cast<long long>(config.timeout_seconds * 1e6));
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);

  nlohmann::json body;
  body["model"] = config.model_name;
  body["temperature"] = config.temperature;
  body["messages"] = nlohmann::json::array();
  for (const ChatMessage& m : messages) {
    body["messages"].push_back({{"role", m.role}, {"content", m.content}});
  }
  const std::string payload = body.dump();

  httplib::Headers headers;
  if (const char* key = std::getenv(config.api_key_env.c_str()); key != nullptr && *key != '\0') {
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }

  const std::string path = url.path_prefix + "/chat/completions";
  int attempt = 0;
  while (true) {
    httplib::Result res = client.Post(path, headers, payload, "application/json");
    if (!res) {
      if (res.error() == httplib::Error::ConnectionTimeout || res.error() == httplib::Error::Read ||
          res.error() == httplib::Error::Write) {
        throw ChatTimeoutError("chat endpoint timed out after " + std::to_string(config.timeout_seconds) +
                               "s (" + httplib::to_string(res.error()) + ")");
      }
      throw ChatError(0, "transport failure: " + httplib::to_string(res.error()));
    }
    if (res->status == 429 || res->status >= 500) {
      if (attempt >= config.max_retries) {
        throw ChatError(res->status, res->body.substr(0, 200));
      }
      std::this_thread::sleep_for(
          std::chrono::duration<double>(jittered_backoff_seconds(config.backoff_base_seconds, attempt)));
      ++attempt;
      continue;
    }
    if (res->status != 200) {
      throw ChatError(res->status, res->body.substr(0, 200));
    }
    nlohmann::json reply;
    try {
      reply = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::parse_error& e) {
      throw ChatError(res->status, std::string("unparseable body: ") + e.what());
    }
    try {
      ChatResult out;
      out.content = reply.at("choices").at(0).at("message").at("content").get<std::string>();
      out.retries = attempt;
      return out;
    } catch (const nlohmann::json::exception&) {
      throw ChatError(res->status, "response missing choices[0].message.content");
    }
  }
}

std::vector<BatchChatResult> chat_complete_batch(const EndpointConfig& config,
                                                 const std::vector<std::vector<ChatMessage>>& items) {
  if (config.max_concurrency < 1) {
    throw std::invalid_argument("chat_complete_batch: max_concurrency must be >= 1");
  }
  std::vector<BatchChatResult> results(items.size());
  std::atomic<std::size_t> next{0};
  const std::size_t workers =
      std::min<std::size_t>(static_cast<std::size_t>(config.max_concurrency), std::max<std::size_t>(items.size(), 1));
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      while (true) {
        const std::size_t i = next.fetch_add(1);
        if (i >= items.size()) return;
        try {
          const ChatResult r = chat_complete(config, items[i]);
          results[i] = {r.content, r.retries, true, ""};
        } catch (const std::exception& e) {
          results[i] = {"", 0, false, e.what()};
        }
      }
    });
  }
  for (std::thread& t : pool) t.join();
  return results;
}

LlmInjection inject_errors_llm(const EndpointConfig& config, const std::string& question,
                               const std::string& response) {
  if (response.empty()) throw std::invalid_argument("inject_errors_llm: response must be nonempty");
  const std::string prompt = render_injection_prompt(question, response);
  const ChatResult chat = chat_complete(config, {{"user", prompt}});

  std::string text = chat.content;
  const auto strip_label = [&](const std::string& label) {
    if (text.size() >= label.size()) {
      bool match = true;
      for (std::size_t i = 0; i < label.size(); ++i) {
        if (std::tolower(static_cast<unsigned char>(text[i])) !=
            std::tolower(static_cast<unsigned char>(label[i]))) {
          match = false;
          break;
        }
      }
      if (match) text.erase(0, label.size());
    }
  };
  strip_label("modified response:");
  const auto first = text.find_first_not_of(" \t\r\n");
  const auto last = text.find_last_not_of(" \t\r\n");
  text = first == std::string::npos ? "" : text.substr(first, last - first + 1);

  LlmInjection out;
  if (text.empty()) {
    out.reject_reason = "empty reply";
    return out;
  }
  if (text == response) {
    out.reject_reason = "reply identical to the original response";
    return out;
  }
  out.accepted = true;
  out.text = std::move(text);
  return out;
}

}  // namespace preflab
