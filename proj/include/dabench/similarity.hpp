#pragma once

// Text similarity used for query diversity, repetition penalties and step
// contribution scores. Every embedder returns exactly 1.0 for identical
// inputs and is symmetric.

#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dabench/llm.hpp"

namespace dabench::sim {

class EmbedderUnavailable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual const std::string& name() const = 0;
  // In [-1, 1].
  virtual double similarity(std::string_view a, std::string_view b) = 0;
};

// Cosine of lowercase word-count vectors. Texts without tokens score 0
// against anything but themselves.
class LexicalEmbedder final : public Embedder {
 public:
  const std::string& name() const override { return name_; }
  double similarity(std::string_view a, std::string_view b) override;

 private:
  std::string name_ = "lexical";
};

// Cosine of dense vectors from an OpenAI-style /embeddings endpoint.
// Vectors are cached per text; safe for concurrent use.
class RemoteEmbedder final : public Embedder {
 public:
  struct Spec {
    std::string endpoint;  // base URL; "/embeddings" is appended
    std::string model_name;
    std::string api_key_env = "EMBEDDING_API_KEY";
    std::chrono::seconds timeout{60};
    llm::RetryPolicy retry;
  };
  explicit RemoteEmbedder(Spec spec);
  const std::string& name() const override { return name_; }
  double similarity(std::string_view a, std::string_view b) override;
  std::vector<double> embed(std::string_view text);

 private:
  Spec spec_;
  std::string name_ = "remote";
  std::mutex mu_;
  std::map<std::string, std::vector<double>, std::less<>> cache_;
};

double cosine(const std::vector<double>& a, const std::vector<double>& b);

// {"kind": "lexical"} or {"kind": "remote", "endpoint": ..., "model_name": ..., "api_key_env": ...}
std::shared_ptr<Embedder> make_embedder(const nlohmann::json& config);

}  // namespace dabench::sim
