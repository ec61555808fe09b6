#pragma once

#include <string>
#include <vector>

namespace preflab {

// Chat-completion endpoint settings. The API key is read from the named
// environment variable at request time and never persisted.
struct EndpointConfig {
  std::string base_url;  // e.g. "http://127.0.0.1:8321"
  std::string model_name;
  std::string api_key_env = "BPO_LLM_API_KEY";
  double timeout_seconds = 30.0;
  int max_retries = 3;
  int max_concurrency = 4;
  double backoff_base_seconds = 1.0;  // doubled per retry, with jitter
  double temperature = 0.7;
};

struct ChatMessage {
  std::string role;
  std::string content;
};

struct ChatResult {
  std::string content;
  int retries = 0;
};

// POSTs {model, messages, temperature} to {base_url}/chat/completions and
// returns the first choice's message content. 429 and 5xx responses are
// retried with exponential backoff; timeouts raise ChatTimeoutError.
ChatResult chat_complete(const EndpointConfig& config, const std::vector<ChatMessage>& messages);

// Runs many chats with at most max_concurrency in flight; results keep the
// input order. Per-item failures are reported in `error` rather than thrown.
struct BatchChatResult {
  std::string content;
  int retries = 0;
  bool ok = false;
  std::string error;
};
std::vector<BatchChatResult> chat_complete_batch(const EndpointConfig& config,
                                                 const std::vector<std::vector<ChatMessage>>& items);

struct LlmInjection {
  bool accepted = false;
  std::string text;           // cleaned modified response when accepted
  std::string reject_reason;  // set when the reply was unusable
};

// Sends the injection prompt for (question, response), strips any leading
// "Modified response:" label and surrounding whitespace. Replies that are
// empty or identical to the input are rejected, not errors; the caller is
// expected to fall back to rule-based injection.
LlmInjection inject_errors_llm(const EndpointConfig& config, const std::string& question,
                               const std::string& response);

}  // namespace preflab
