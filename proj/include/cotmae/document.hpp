#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace cotmae {

/// A raw corpus document; pre-training spans are drawn from one of these.
struct Document {
  std::string id;
  std::string text;
};

/// Reads `{"id": ..., "text": ...}` JSONL. Rejects empty or duplicate ids and
/// whitespace-only text, naming the offending line.
std::vector<Document> load_documents(const std::filesystem::path& path);
void save_documents(const std::filesystem::path& path, const std::vector<Document>& docs);

}  // namespace cotmae
