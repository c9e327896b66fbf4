#pragma once

// Chat-completions-style remote judge client: renders registered prompt
// templates, posts them at temperature 0, enforces a forced-choice response
// vocabulary, retries with exponential backoff, and caches responses on disk
// keyed by a content hash of the rendered prompt.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>

#include "faithkit/common.hpp"
#include "faithkit/judge.hpp"

namespace faithkit::judge {

struct RemoteConfig {
  std::string endpoint;  // full URL of the chat-completions route
  std::string api_key;
  std::string model;
  std::string cache_dir;  // empty disables the disk cache

  // Reads JUDGE_ENDPOINT, JUDGE_API_KEY, and JUDGE_MODEL; a missing variable
  // is a configuration error raised before any network activity.
  static RemoteConfig from_env(const std::string& cache_dir = "") {
    auto fetch = [](const char* name) {
      const char* value = std::getenv(name);
      if (value == nullptr || *value == '\0') {
        throw JudgeError(concat("remote judge: environment variable ", name,
                                " is not set"));
      }
      return std::string(value);
    };
    RemoteConfig config;
    config.endpoint = fetch("JUDGE_ENDPOINT");
    config.api_key = fetch("JUDGE_API_KEY");
    config.model = fetch("JUDGE_MODEL");
    config.cache_dir = cache_dir;
    return config;
  }

  void validate() const {
    auto missing = [](const std::string& value, const char* what) {
      if (value.empty()) {
        throw JudgeError(concat("remote judge: ", what, " not configured"));
      }
    };
    missing(endpoint, "endpoint");
    missing(api_key, "api key");
    missing(model, "model");
  }
};

struct HttpResponse {
  int status = 0;
  std::string body;
  bool transport_ok = false;
};

// Injectable transport and sleep so tests can replay fixtures and observe the
// backoff schedule without waiting on it.
using Transport =
    std::function<HttpResponse(const RemoteConfig&, const std::string& body)>;
using Sleeper = std::function<void(std::chrono::milliseconds)>;

struct JudgeRequest {
  std::string task;  // "consistency_pair" or "drf_match"
  std::vector<std::string> claims;
  std::string ground_truth;
  std::string context;
  std::string template_id;
};

struct JudgeVerdict {
  std::optional<ConsistencyLabel> label;
  std::optional<bool> matched;
  std::string raw_response;
  bool cache_hit = false;
  double latency_ms = 0.0;
};

struct PromptTemplate {
  std::string system_prompt;
  std::string user_template;  // {a} {b} {claim} {truth} {context} placeholders
};

inline const std::map<std::string, PromptTemplate>& prompt_templates() {
  static const std::map<std::string, PromptTemplate> templates = {
      {"consistency_pair",
       {"You compare two claims about the differences between a pair of "
        "images. Claim A was given when asked whether the images are the "
        "same; claim B was given when asked whether they are different. "
        "Label the pair: consistent if both describe the same difference, "
        "contradictory if they conflict on the same aspect, ambiguous if "
        "uncertain or vague.",
        "Claim A: {a}\nClaim B: {b}\n\nAnswer with exactly one word: "
        "consistent, contradictory, or ambiguous."}},
      {"drf_match",
       {"You verify whether a model's claimed image difference corresponds "
        "to a ground-truth difference, considering the scene description "
        "and the texts together.",
        "Scene context: {context}\nModel claim: {claim}\nGround-truth "
        "difference: {truth}\n\nDoes the claim describe this ground-truth "
        "difference? Answer with exactly one word: yes or no."}},
  };
  return templates;
}

inline std::string render_template(const std::string& text,
                                   const std::map<std::string, std::string>&
                                       values) {
  std::string out = text;
  for (const auto& [key, value] : values) {
    const std::string placeholder = "{" + key + "}";
    std::size_t pos = 0;
    while ((pos = out.find(placeholder, pos)) != std::string::npos) {
      out.replace(pos, placeholder.size(), value);
      pos += value.size();
    }
  }
  return out;
}

// POSTs the chat-completions body to the configured endpoint.
inline HttpResponse default_transport(const RemoteConfig& config,
                                      const std::string& body) {
  const auto scheme_end = config.endpoint.find("://");
  require(scheme_end != std::string::npos,
          "remote judge: endpoint must be a full URL: ", config.endpoint);
  const auto path_start = config.endpoint.find('/', scheme_end + 3);
  const std::string base = path_start == std::string::npos
                               ? config.endpoint
                               : config.endpoint.substr(0, path_start);
  const std::string path = path_start == std::string::npos
                               ? "/v1/chat/completions"
                               : config.endpoint.substr(path_start);
  httplib::Client client(base);
  client.set_connection_timeout(30);
  client.set_read_timeout(120);
  const httplib::Headers headers = {
      {"Authorization", "Bearer " + config.api_key}};
  auto result = client.Post(path, headers, body, "application/json");
  HttpResponse out;
  if (result) {
    out.transport_ok = true;
    out.status = result->status;
    out.body = result->body;
  }
  return out;
}

class RemoteJudge final : public Judge {
 public:
  explicit RemoteJudge(RemoteConfig config, Transport transport = {},
                       Sleeper sleeper = {})
      : config_(std::move(config)),
        transport_(transport ? std::move(transport) : Transport(default_transport)),
        sleeper_(sleeper ? std::move(sleeper) : Sleeper([](std::chrono::milliseconds d) {
                   std::this_thread::sleep_for(d);
                 })) {
    config_.validate();
    if (!config_.cache_dir.empty()) {
      std::filesystem::create_directories(config_.cache_dir);
    }
  }

  JudgeVerdict evaluate(const JudgeRequest& request) {
    const auto it = prompt_templates().find(request.template_id);
    require(it != prompt_templates().end(),
            "remote judge: unknown template id '", request.template_id, "'");
    std::map<std::string, std::string> values;
    if (request.task == "consistency_pair") {
      require(request.claims.size() == 2 && !request.claims[0].empty() &&
                  !request.claims[1].empty(),
              "remote judge: consistency_pair needs two nonempty claims");
      values["a"] = request.claims[0];
      values["b"] = request.claims[1];
    } else if (request.task == "drf_match") {
      require(request.claims.size() == 1 && !request.claims[0].empty() &&
                  !request.ground_truth.empty(),
              "remote judge: drf_match needs a claim and a ground truth");
      values["claim"] = request.claims[0];
      values["truth"] = request.ground_truth;
      values["context"] =
          request.context.empty() ? "(none)" : request.context;
    } else {
      throw JudgeError(concat("remote judge: unknown task '", request.task,
                              "'"));
    }
    const std::string user_prompt =
        render_template(it->second.user_template, values);

    JudgeVerdict verdict;
    const auto start = std::chrono::steady_clock::now();
    verdict.raw_response =
        complete(it->second.system_prompt, user_prompt, &verdict.cache_hit);
    verdict.latency_ms =
        std::chrono::duration<double, std::milli>(
            std::chrono::steady_clock::now() - start)
            .count();

    const std::string word = first_word(verdict.raw_response);
    if (request.task == "consistency_pair") {
      if (word == "consistent") {
        verdict.label = ConsistencyLabel::kConsistent;
      } else if (word == "contradictory") {
        verdict.label = ConsistencyLabel::kContradictory;
      } else if (word == "ambiguous") {
        verdict.label = ConsistencyLabel::kAmbiguous;
      } else {
        throw JudgeError(concat(
            "remote judge: response outside the label vocabulary: '", word,
            "'"));
      }
    } else {
      if (word == "yes") {
        verdict.matched = true;
      } else if (word == "no") {
        verdict.matched = false;
      } else {
        throw JudgeError(concat(
            "remote judge: response outside the match vocabulary: '", word,
            "'"));
      }
    }
    return verdict;
  }

  ConsistencyLabel consistency(const std::string& claim_same,
                               const std::string& claim_diff) override {
    JudgeRequest request;
    request.task = "consistency_pair";
    request.template_id = "consistency_pair";
    request.claims = {claim_same, claim_diff};
    return *evaluate(request).label;
  }

  bool match(const std::string& claim, const std::string& ground_truth,
             const std::string& context) override {
    JudgeRequest request;
    request.task = "drf_match";
    request.template_id = "drf_match";
    request.claims = {claim};
    request.ground_truth = ground_truth;
    request.context = context;
    return *evaluate(request).matched;
  }

  // Raw completion with caching, single-flight deduplication, and at most
  // three retries (0.5s, 2s, 8s backoff).
  std::string complete(const std::string& system_prompt,
                       const std::string& user_prompt,
                       bool* cache_hit = nullptr) {
    const std::string key =
        to_hex(fnv1a64(concat(config_.model, '\x1f', system_prompt, '\x1f',
                              user_prompt)));
    if (cache_hit) *cache_hit = false;
    {
      std::shared_lock lock(cache_mutex_);
      if (auto it = memory_cache_.find(key); it != memory_cache_.end()) {
        if (cache_hit) *cache_hit = true;
        return it->second;
      }
    }
    if (auto from_disk = read_disk_cache(key)) {
      std::unique_lock lock(cache_mutex_);
      memory_cache_[key] = *from_disk;
      if (cache_hit) *cache_hit = true;
      return *from_disk;
    }

    // Single-flight: concurrent identical prompts share one network request.
    std::shared_future<std::string> flight;
    bool owner = false;
    {
      std::lock_guard lock(inflight_mutex_);
      auto it = inflight_.find(key);
      if (it == inflight_.end()) {
        auto promise = std::make_shared<std::promise<std::string>>();
        inflight_[key] = {promise, promise->get_future().share()};
        owner = true;
      }
      flight = inflight_[key].future;
    }
    if (!owner) return flight.get();

    std::string response;
    std::exception_ptr failure;
    try {
      response = fetch_with_retries(system_prompt, user_prompt);
      store_cache(key, response);
    } catch (...) {
      failure = std::current_exception();
    }
    {
      std::lock_guard lock(inflight_mutex_);
      auto it = inflight_.find(key);
      if (failure) {
        it->second.promise->set_exception(failure);
      } else {
        it->second.promise->set_value(response);
      }
      inflight_.erase(it);
    }
    if (failure) std::rethrow_exception(failure);
    return response;
  }

  const RemoteConfig& config() const { return config_; }

 private:
  static std::string first_word(const std::string& text) {
    std::string normalized = normalize_text(text);
    const auto space = normalized.find(' ');
    if (space != std::string::npos) normalized = normalized.substr(0, space);
    while (!normalized.empty() &&
           !std::isalpha(static_cast<unsigned char>(normalized.back()))) {
      normalized.pop_back();
    }
    return normalized;
  }

  std::string fetch_with_retries(const std::string& system_prompt,
                                 const std::string& user_prompt) {
    nlohmann::json body;
    body["model"] = config_.model;
    body["temperature"] = 0;
    body["messages"] = nlohmann::json::array(
        {{{"role", "system"}, {"content", system_prompt}},
         {{"role", "user"}, {"content", user_prompt}}});
    const std::string payload = body.dump();

    static constexpr std::chrono::milliseconds kBackoff[] = {
        std::chrono::milliseconds(500), std::chrono::milliseconds(2000),
        std::chrono::milliseconds(8000)};
    std::string last_error;
    for (int attempt = 0; attempt <= 3; ++attempt) {
      if (attempt > 0) sleeper_(kBackoff[attempt - 1]);
      const HttpResponse response = transport_(config_, payload);
      if (!response.transport_ok) {
        last_error = "transport failure";
        continue;
      }
      if (response.status != 200) {
        last_error = concat("status ", response.status);
        continue;
      }
      try {
        const auto parsed = nlohmann::json::parse(response.body);
        return parsed.at("choices").at(0).at("message").at("content")
            .get<std::string>();
      } catch (const nlohmann::json::exception& err) {
        throw JudgeError(concat("remote judge: malformed response body: ",
                                err.what()));
      }
    }
    throw JudgeError(concat("remote judge: request failed after retries (",
                            last_error, ")"));
  }

  std::optional<std::string> read_disk_cache(const std::string& key) const {
    if (config_.cache_dir.empty()) return std::nullopt;
    const auto path =
        std::filesystem::path(config_.cache_dir) / (key + ".json");
    std::ifstream in(path);
    if (!in) return std::nullopt;
    try {
      nlohmann::json entry;
      in >> entry;
      return entry.at("response").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      return std::nullopt;
    }
  }

  void store_cache(const std::string& key, const std::string& response) {
    std::unique_lock lock(cache_mutex_);
    memory_cache_[key] = response;
    if (config_.cache_dir.empty()) return;
    nlohmann::json entry;
    entry["model"] = config_.model;
    entry["key"] = key;
    entry["response"] = response;
    const auto path =
        std::filesystem::path(config_.cache_dir) / (key + ".json");
    std::ofstream out(path);
    out << entry.dump(2) << '\n';
  }

  struct Inflight {
    std::shared_ptr<std::promise<std::string>> promise;
    std::shared_future<std::string> future;
  };

  RemoteConfig config_;
  Transport transport_;
  Sleeper sleeper_;
  mutable std::shared_mutex cache_mutex_;
  std::unordered_map<std::string, std::string> memory_cache_;
  std::mutex inflight_mutex_;
  std::map<std::string, Inflight> inflight_;
};

}  // namespace faithkit::judge
