#include "dabench/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include <fmt/format.h>

#include "dabench/text.hpp"

namespace dabench::sim {

namespace {

double clamp_unit(double x) { return std::clamp(x, -1.0, 1.0); }

std::map<std::string, double> counts(std::string_view s) {
  std::map<std::string, double> out;
  for (auto& t : text::word_tokens(s)) out[std::move(t)] += 1.0;
  return out;
}

}  // namespace

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument(fmt::format("cosine of vectors with sizes {} and {}", a.size(), b.size()));
  }
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return clamp_unit(dot / std::sqrt(na * nb));
}

double LexicalEmbedder::similarity(std::string_view a, std::string_view b) {
  if (a == b) return 1.0;
  auto ca = counts(a), cb = counts(b);
  double dot = 0, na = 0, nb = 0;
  for (const auto& [tok, n] : ca) {
    na += n * n;
    auto it = cb.find(tok);
    if (it != cb.end()) dot += n * it->second;
  }
  for (const auto& [tok, n] : cb) nb += n * n;
  if (na == 0 || nb == 0) return 0.0;
  return clamp_unit(dot / std::sqrt(na * nb));
}

RemoteEmbedder::RemoteEmbedder(Spec spec) : spec_(std::move(spec)) {
  if (spec_.endpoint.empty()) throw std::invalid_argument("remote embedder needs an endpoint");
  name_ = "remote:" + spec_.model_name;
}

std::vector<double> RemoteEmbedder::embed(std::string_view text) {
  {
    std::lock_guard lock(mu_);
    auto it = cache_.find(text);
    if (it != cache_.end()) return it->second;
  }
  std::map<std::string, std::string> headers;
  if (const char* key = std::getenv(spec_.api_key_env.c_str())) headers["Authorization"] = fmt::format("Bearer {}", key);
  std::string url = spec_.endpoint;
  while (!url.empty() && url.back() == '/') url.pop_back();
  nlohmann::json body = {{"model", spec_.model_name}, {"input", std::string(text)}};
  std::vector<double> vec;
  try {
    auto res = llm::post_json_with_retry(url + "/embeddings", headers, body.dump(), spec_.timeout, spec_.retry, nullptr);
    auto j = nlohmann::json::parse(res.body);
    vec = j.at("data").at(0).at("embedding").get<std::vector<double>>();
  } catch (const llm::BackendUnavailable& e) {
    throw EmbedderUnavailable(e.what());
  } catch (const llm::BadResponse& e) {
    throw EmbedderUnavailable(e.what());
  } catch (const nlohmann::json::exception& e) {
    throw EmbedderUnavailable(fmt::format("malformed embedding response: {}", e.what()));
  }
  if (vec.empty()) throw EmbedderUnavailable("empty embedding vector");
  std::lock_guard lock(mu_);
  cache_.emplace(std::string(text), vec);
  return vec;
}

double RemoteEmbedder::similarity(std::string_view a, std::string_view b) {
  if (a == b) return 1.0;
  auto va = embed(a);
  auto vb = embed(b);
  if (va.size() != vb.size()) throw EmbedderUnavailable("embedding dimensions differ");
  return cosine(va, vb);
}

std::shared_ptr<Embedder> make_embedder(const nlohmann::json& config) {
  auto kind = config.value("kind", std::string("lexical"));
  if (kind == "lexical") return std::make_shared<LexicalEmbedder>();
  if (kind == "remote") {
    RemoteEmbedder::Spec s;
    s.endpoint = config.value("endpoint", std::string{});
    s.model_name = config.value("model_name", std::string{});
    if (config.contains("api_key_env")) s.api_key_env = config["api_key_env"].get<std::string>();
    return std::make_shared<RemoteEmbedder>(std::move(s));
  }
  throw std::invalid_argument(fmt::format("unknown embedder kind: {}", kind));
}

}  // namespace dabench::sim
