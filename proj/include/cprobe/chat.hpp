#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

// Chat-completion endpoints. Every pipeline stage talks to a ChatEndpoint so
// live HTTP, journaled replay and test stubs are interchangeable.
namespace cprobe::chat {

struct ChatMessage {
  std::string role;  // "system", "user" or "assistant"
  std::string content;

  bool operator==(const ChatMessage&) const = default;
};

struct ChatRequest {
  std::vector<ChatMessage> messages;
  double temperature = 1.0;
  // Distinguishes deliberate re-asks of an identical conversation (for
  // example a regeneration after a failed structure check) so a journal
  // keeps them apart.
  int variant = 0;
};

class ChatEndpoint {
 public:
  virtual ~ChatEndpoint() = default;
  // Returns the assistant reply text. Throws EndpointError.
  virtual std::string complete(const ChatRequest& request) = 0;
  virtual std::string model() const = 0;
};

// OpenAI-style POST {base_url}/chat/completions.
class HttpChatEndpoint : public ChatEndpoint {
 public:
  HttpChatEndpoint(std::string base_url, std::string model, std::string api_key,
                   std::chrono::seconds timeout = std::chrono::seconds(120));

  std::string complete(const ChatRequest& request) override;
  std::string model() const override { return model_; }

 private:
  std::string scheme_host_port_;
  std::string path_prefix_;
  std::string model_;
  std::string api_key_;
  std::chrono::seconds timeout_;
};

// Wire body sent by HttpChatEndpoint; exposed for tests.
std::string request_body(const std::string& model, const ChatRequest& request);
// Extracts choices[0].message.content. Throws EndpointError on malformed replies.
std::string parse_completion(const std::string& body);

using Sleeper = std::function<void(std::chrono::milliseconds)>;

// Retries retryable EndpointErrors after each delay in `backoff` (1 s, 4 s,
// 16 s by default), then gives up with a non-retryable EndpointError.
class RetryingEndpoint : public ChatEndpoint {
 public:
  explicit RetryingEndpoint(std::shared_ptr<ChatEndpoint> inner,
                            std::vector<std::chrono::milliseconds> backoff = default_backoff(),
                            Sleeper sleeper = {});

  std::string complete(const ChatRequest& request) override;
  std::string model() const override { return inner_->model(); }

  static std::vector<std::chrono::milliseconds> default_backoff();

 private:
  std::shared_ptr<ChatEndpoint> inner_;
  std::vector<std::chrono::milliseconds> backoff_;
  Sleeper sleeper_;
};

// Append-only JSONL journal of request/response pairs keyed by a digest of
// (model, messages, temperature, variant). Journaled replies are served from
// the journal; with no inner endpoint a miss raises ReplayMissError. Reruns
// against the same journal therefore resume where an aborted run stopped.
class JournalEndpoint : public ChatEndpoint {
 public:
  JournalEndpoint(std::filesystem::path path, std::shared_ptr<ChatEndpoint> inner, std::string model = {});

  std::string complete(const ChatRequest& request) override;
  std::string model() const override { return model_; }

  std::size_t hits() const;
  std::size_t misses() const;

 private:
  std::filesystem::path path_;
  std::shared_ptr<ChatEndpoint> inner_;
  std::string model_;
  mutable std::mutex mutex_;
  std::map<std::string, std::string> entries_;
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

std::string request_key(const std::string& model, const ChatRequest& request);

// Wraps a callable; used for stubs.
class FunctionEndpoint : public ChatEndpoint {
 public:
  using Fn = std::function<std::string(const ChatRequest&)>;
  explicit FunctionEndpoint(Fn fn, std::string model = "stub") : fn_(std::move(fn)), model_(std::move(model)) {}

  std::string complete(const ChatRequest& request) override { return fn_(request); }
  std::string model() const override { return model_; }

 private:
  Fn fn_;
  std::string model_;
};

}  // namespace cprobe::chat
