#pragma once

// Topic filter matching and the subscription trie used for routing.

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "busgw/wire.hpp"

namespace busgw::topic {

inline std::vector<std::string_view> split_levels(std::string_view s) {
  std::vector<std::string_view> levels;
  std::size_t start = 0;
  while (true) {
    const std::size_t end = s.find('/', start);
    if (end == std::string_view::npos) {
      levels.push_back(s.substr(start));
      return levels;
    }
    levels.push_back(s.substr(start, end - start));
    start = end + 1;
  }
}

// Level-by-level match. Wildcards at the first level never match topics that
// start with '$'.
inline bool match_topic(std::string_view filter, std::string_view topic) {
  const auto f = split_levels(filter);
  const auto t = split_levels(topic);
  if (!t.empty() && !t[0].empty() && t[0][0] == '$' && (f[0] == "+" || f[0] == "#")) return false;
  std::size_t i = 0;
  for (; i < f.size(); ++i) {
    if (f[i] == "#") return true;
    if (i >= t.size()) return false;
    if (f[i] != "+" && f[i] != t[i]) return false;
  }
  return i == t.size();
}

using SubscriberId = std::uint64_t;

// Trie keyed by topic levels. '+' and '#' children are kept apart from the
// literal children so a lookup only follows edges that can match.
class TopicTree {
 public:
  // Returns false when the filter is malformed. Re-subscribing the same
  // filter replaces the granted QoS.
  bool subscribe(std::string_view filter, SubscriberId who, wire::QosLevel qos) {
    if (!wire::is_valid_topic_filter(filter)) return false;
    std::unique_lock lock(mutex_);
    Node* node = &root_;
    for (auto level : split_levels(filter)) node = &node->child(level);
    node->subscribers[who] = qos;
    return true;
  }

  bool unsubscribe(std::string_view filter, SubscriberId who) {
    if (!wire::is_valid_topic_filter(filter)) return false;
    std::unique_lock lock(mutex_);
    const auto levels = split_levels(filter);
    return erase(root_, levels, 0, who);
  }

  // Collects (subscriber, granted QoS). A subscriber matched through several
  // filters appears once with its highest grant.
  std::unordered_map<SubscriberId, wire::QosLevel> match(std::string_view topic) const {
    std::unordered_map<SubscriberId, wire::QosLevel> out;
    const auto levels = split_levels(topic);
    const bool system = !levels[0].empty() && levels[0][0] == '$';
    std::shared_lock lock(mutex_);
    collect(root_, levels, 0, system, out);
    return out;
  }

  std::size_t node_count() const {
    std::shared_lock lock(mutex_);
    return count(root_);
  }

  bool empty() const { return node_count() == 1; }

 private:
  struct Node {
    std::map<std::string, std::unique_ptr<Node>, std::less<>> children;
    std::unique_ptr<Node> plus;
    std::unique_ptr<Node> hash;  // always a leaf
    std::map<SubscriberId, wire::QosLevel> subscribers;

    Node& child(std::string_view level) {
      std::unique_ptr<Node>* slot;
      if (level == "+") {
        slot = &plus;
      } else if (level == "#") {
        slot = &hash;
      } else {
        auto it = children.find(level);
        if (it == children.end()) it = children.emplace(std::string(level), nullptr).first;
        slot = &it->second;
      }
      if (!*slot) *slot = std::make_unique<Node>();
      return **slot;
    }

    bool prunable() const { return subscribers.empty() && children.empty() && !plus && !hash; }
  };

  static void add(const Node& node, std::unordered_map<SubscriberId, wire::QosLevel>& out) {
    for (const auto& [who, qos] : node.subscribers) {
      auto [it, inserted] = out.emplace(who, qos);
      if (!inserted && wire::to_int(qos) > wire::to_int(it->second)) it->second = qos;
    }
  }

  static void collect(const Node& node, const std::vector<std::string_view>& levels, std::size_t i, bool system,
                      std::unordered_map<SubscriberId, wire::QosLevel>& out) {
    const bool wild_ok = !(system && i == 0);
    if (node.hash && wild_ok) add(*node.hash, out);  // "a/#" also matches "a"
    if (i == levels.size()) {
      add(node, out);
      return;
    }
    if (auto it = node.children.find(levels[i]); it != node.children.end()) {
      collect(*it->second, levels, i + 1, system, out);
    }
    if (node.plus && wild_ok) collect(*node.plus, levels, i + 1, system, out);
  }

  static bool erase(Node& node, const std::vector<std::string_view>& levels, std::size_t i, SubscriberId who) {
    if (i == levels.size()) return node.subscribers.erase(who) > 0;
    std::unique_ptr<Node>* slot = nullptr;
    if (levels[i] == "+") {
      slot = &node.plus;
    } else if (levels[i] == "#") {
      slot = &node.hash;
    } else if (auto it = node.children.find(levels[i]); it != node.children.end()) {
      slot = &it->second;
    }
    if (slot == nullptr || !*slot) return false;
    const bool removed = erase(**slot, levels, i + 1, who);
    if ((*slot)->prunable()) {
      if (levels[i] == "+" || levels[i] == "#") {
        slot->reset();
      } else {
        node.children.erase(node.children.find(levels[i]));
      }
    }
    return removed;
  }

  static std::size_t count(const Node& node) {
    std::size_t n = 1;
    for (const auto& [_, c] : node.children) n += count(*c);
    if (node.plus) n += count(*node.plus);
    if (node.hash) n += count(*node.hash);
    return n;
  }

  mutable std::shared_mutex mutex_;
  Node root_;
};

}  // namespace busgw::topic
