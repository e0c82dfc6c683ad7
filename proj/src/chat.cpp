#include "cprobe/chat.hpp"

#include "cprobe/common.hpp"
#include "cprobe/error.hpp"

#include <httplib.h>
#include <json.hpp>

#include <fstream>
#include <thread>

namespace cprobe::chat {
namespace {

using nlohmann::json;

json messages_json(const ChatRequest& request) {
  json messages = json::array();
  for (const auto& m : request.messages) {
    messages.push_back({{"role", m.role}, {"content", m.content}});
  }
  return messages;
}

}  // namespace

std::string request_body(const std::string& model, const ChatRequest& request) {
  json body;
  body["model"] = model;
  body["messages"] = messages_json(request);
  body["temperature"] = request.temperature;
  return body.dump();
}

std::string parse_completion(const std::string& body) {
  try {
    const auto j = json::parse(body);
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw EndpointError("malformed completion response: " + std::string(e.what()), false);
  }
}

HttpChatEndpoint::HttpChatEndpoint(std::string base_url, std::string model, std::string api_key,
                                   std::chrono::seconds timeout)
    : model_(std::move(model)), api_key_(std::move(api_key)), timeout_(timeout) {
  while (!base_url.empty() && base_url.back() == '/') base_url.pop_back();
  const auto scheme_end = base_url.find("://");
  if (scheme_end == std::string::npos) {
    throw ConfigError("endpoint URL must start with http:// or https://");
  }
  const auto path_start = base_url.find('/', scheme_end + 3);
  scheme_host_port_ = base_url.substr(0, path_start);
  path_prefix_ = path_start == std::string::npos ? "" : base_url.substr(path_start);
}

std::string HttpChatEndpoint::complete(const ChatRequest& request) {
  httplib::Client client(scheme_host_port_);
  if (!client.is_valid()) {
    throw EndpointError("unsupported endpoint URL " + scheme_host_port_, false);
  }
  client.set_connection_timeout(timeout_);
  client.set_read_timeout(timeout_);
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
  const auto result =
      client.Post(path_prefix_ + "/chat/completions", headers, request_body(model_, request), "application/json");
  if (!result) {
    throw EndpointError("request failed: " + httplib::to_string(result.error()), true);
  }
  if (result->status == 429 || result->status >= 500) {
    throw EndpointError("endpoint returned HTTP " + std::to_string(result->status), true);
  }
  if (result->status != 200) {
    throw EndpointError("endpoint returned HTTP " + std::to_string(result->status) + ": " + result->body, false);
  }
  return parse_completion(result->body);
}

RetryingEndpoint::RetryingEndpoint(std::shared_ptr<ChatEndpoint> inner,
                                   std::vector<std::chrono::milliseconds> backoff,
                                   Sleeper sleeper)
    : inner_(std::move(inner)), backoff_(std::move(backoff)), sleeper_(std::move(sleeper)) {
  if (!sleeper_) {
    sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
  }
}

std::vector<std::chrono::milliseconds> RetryingEndpoint::default_backoff() {
  using namespace std::chrono_literals;
  return {1000ms, 4000ms, 16000ms};
}

std::string RetryingEndpoint::complete(const ChatRequest& request) {
  for (std::size_t attempt = 0;; ++attempt) {
    try {
      return inner_->complete(request);
    } catch (const EndpointError& e) {
      if (!e.retryable()) throw;
      if (attempt >= backoff_.size()) {
        throw EndpointError("giving up after " + std::to_string(attempt + 1) + " attempts: " + e.what(), false);
      }
      sleeper_(backoff_[attempt]);
    }
  }
}

std::string request_key(const std::string& model, const ChatRequest& request) {
  json key;
  key["model"] = model;
  key["messages"] = messages_json(request);
  key["temperature"] = request.temperature;
  key["variant"] = request.variant;
  return to_hex(fnv1a64(key.dump()));
}

JournalEndpoint::JournalEndpoint(std::filesystem::path path, std::shared_ptr<ChatEndpoint> inner, std::string model)
    : path_(std::move(path)), inner_(std::move(inner)), model_(std::move(model)) {
  if (model_.empty() && inner_) model_ = inner_->model();
  std::ifstream in(path_);
  if (!in) return;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      const auto j = json::parse(line);
      entries_[j.at("key").get<std::string>()] = j.at("response").get<std::string>();
    } catch (const json::exception& e) {
      throw SchemaError(path_.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

std::string JournalEndpoint::complete(const ChatRequest& request) {
  const auto key = request_key(model_, request);
  {
    std::lock_guard lock(mutex_);
    if (const auto it = entries_.find(key); it != entries_.end()) {
      ++hits_;
      return it->second;
    }
    ++misses_;
  }
  if (!inner_) {
    throw ReplayMissError("no journaled reply for request " + key);
  }
  auto response = inner_->complete(request);

  json record;
  record["key"] = key;
  record["model"] = model_;
  record["temperature"] = request.temperature;
  record["variant"] = request.variant;
  record["messages"] = messages_json(request);
  record["response"] = response;

  std::lock_guard lock(mutex_);
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  std::ofstream out(path_, std::ios::app);
  if (!out) throw IoError("cannot append to journal " + path_.string());
  out << record.dump() << '\n';
  out.flush();
  entries_.emplace(key, response);
  return response;
}

std::size_t JournalEndpoint::hits() const {
  std::lock_guard lock(mutex_);
  return hits_;
}

std::size_t JournalEndpoint::misses() const {
  std::lock_guard lock(mutex_);
  return misses_;
}

}  // namespace cprobe::chat
