#include "cotmae/synthetic.hpp"

#include <cctype>
#include <numeric>
#include <stdexcept>

namespace cotmae {

std::string pseudo_word(std::size_t index) {
  static constexpr char kConsonants[] = "bdfgklmnprstvz";
  static constexpr char kVowels[] = "aeiou";
  constexpr std::size_t kSyllables = 14 * 5;
  std::string w;
  std::size_t x = index;
  for (int s = 0; s < 3; ++s) {
    const std::size_t syl = x % kSyllables;
    x /= kSyllables;
    w.push_back(kConsonants[syl / 5]);
    w.push_back(kVowels[syl % 5]);
  }
  return w;
}

namespace {

std::string sentence(const std::vector<std::string>& words) {
  std::string s;
  for (const auto& w : words) {
    if (!s.empty()) s += ' ';
    s += w;
  }
  s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s + ".";
}

}  // namespace

std::vector<Document> make_overfit_corpus(std::size_t n_docs, std::size_t n_words,
                                          std::size_t sentence_words, std::uint64_t seed) {
  if (n_docs == 0 || n_words == 0 || sentence_words == 0) {
    throw std::invalid_argument("overfit corpus needs positive sizes");
  }
  if (n_docs * 2 * sentence_words < n_words) {
    throw std::invalid_argument("overfit corpus too small to use every word");
  }
  Rng rng(seed);
  // Shuffled passes over the word list guarantee every word appears.
  std::vector<std::size_t> stream;
  while (stream.size() < n_docs * 2 * sentence_words) {
    std::vector<std::size_t> perm(n_words);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    stream.insert(stream.end(), perm.begin(), perm.end());
  }
  std::vector<Document> docs;
  std::size_t pos = 0;
  for (std::size_t d = 0; d < n_docs; ++d) {
    std::string text;
    for (int s = 0; s < 2; ++s) {
      std::vector<std::string> words;
      for (std::size_t i = 0; i < sentence_words; ++i) words.push_back(pseudo_word(stream[pos++]));
      if (!text.empty()) text += ' ';
      text += sentence(words);
    }
    docs.push_back({"d" + std::to_string(d), text});
  }
  return docs;
}

RetrievalTask make_retrieval_task(const RetrievalTaskOptions& o) {
  if (o.n_passages == 0 || o.sentence_words == 0 || o.unique_words > o.sentence_words) {
    throw std::invalid_argument("bad synthetic retrieval options");
  }
  Rng rng(o.seed);
  RetrievalTask task;
  const std::size_t unique_base = o.filler_vocab;
  for (std::size_t p = 0; p < o.n_passages; ++p) {
    std::vector<std::string> sents;
    for (std::size_t s = 0; s < o.filler_sentences; ++s) {
      std::vector<std::string> words;
      for (std::size_t i = 0; i < o.sentence_words; ++i) {
        words.push_back(pseudo_word(rng.below(o.filler_vocab)));
      }
      sents.push_back(sentence(words));
    }
    std::vector<std::string> words;
    for (std::size_t i = 0; i < o.sentence_words; ++i) {
      words.push_back(i < o.unique_words ? pseudo_word(unique_base + p * o.unique_words + i)
                                         : pseudo_word(rng.below(o.filler_vocab)));
    }
    for (std::size_t i = words.size(); i > 1; --i) std::swap(words[i - 1], words[rng.below(i)]);
    const std::string key = sentence(words);
    sents.insert(sents.begin() + static_cast<std::ptrdiff_t>(rng.below(sents.size() + 1)), key);

    std::string text;
    for (const auto& s : sents) text += (text.empty() ? "" : " ") + s;
    const std::string pid = std::to_string(p);
    task.docs.push_back({"doc" + pid, text});
    task.passages.push_back({pid, text});
    task.queries.push_back({"q" + pid, key});
    task.qrels["q" + pid].insert(pid);
  }
  return task;
}

void write_retrieval_task(const std::filesystem::path& dir, const RetrievalTask& task) {
  save_documents(dir / "corpus.jsonl", task.docs);
  write_tsv(dir / "passages.tsv", task.passages);
  write_tsv(dir / "queries.tsv", task.queries);
  std::string q;
  for (const auto& [qid, rel] : task.qrels) {
    for (const auto& pid : rel) q += qid + "\t" + pid + "\n";
  }
  write_file(dir / "qrels.tsv", q);
}

}  // namespace cotmae
