#pragma once

// Dataset model and operations: JSONL/CSV ingestion with validation, canonical
// serialization and digests, undirected-projection modularity, seeded Louvain
// community detection, stratified splits, and a synthetic account fixture.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "botarena/util.hpp"

namespace botarena::corpus {

enum class Label { human, bot };

// 'friend' is a C++ keyword, hence 'friendship' in code; serialized "friend".
enum class Relation { follow, friendship };

std::string to_string(Label l);
Label parse_label(std::string_view s);
std::string to_string(Relation r);
Relation parse_relation(std::string_view s);

struct Tweet {
  std::string timestamp;      // ISO-8601 as ingested/generated
  std::int64_t timestamp_ms = 0;  // parsed ordering key
  std::string text;
  bool operator==(const Tweet&) const = default;
};

struct UserRecord {
  std::string id;
  Label label = Label::human;
  // Kept sorted by property name so feature layouts are stable.
  std::vector<std::pair<std::string, double>> numeric_props;
  std::vector<std::pair<std::string, std::string>> categorical_props;
  std::string description;
  std::vector<Tweet> tweets;  // sorted by timestamp_ms, ties in input order
  bool operator==(const UserRecord&) const = default;
};

struct Edge {
  std::string src, dst;
  Relation relation = Relation::follow;
  bool operator==(const Edge&) const = default;
};

struct Dataset {
  std::vector<UserRecord> users;
  std::vector<Edge> edges;

  // Must be called after users are added or reordered.
  void rebuild_index();
  bool has(std::string_view id) const;
  std::size_t index_of(std::string_view id) const;  // throws on unknown id

  bool operator==(const Dataset& other) const {
    return users == other.users && edges == other.edges;
  }

 private:
  std::map<std::string, std::size_t, std::less<>> index_;
};

struct LoadStats {
  int self_loops_dropped = 0;
};

// Reads users.jsonl / tweets.jsonl / edges.csv. Rejects duplicate ids, tweets
// or edges that reference unknown users, malformed rows (with line numbers),
// unknown relations, and inconsistent property schemas. Self-loop edges are
// dropped (counted in stats). Tweets are sorted per user on ingestion.
Dataset load_dataset(const std::filesystem::path& users_jsonl,
                     const std::filesystem::path& tweets_jsonl,
                     const std::filesystem::path& edges_csv,
                     LoadStats* stats = nullptr);

// Canonical serialization; save + load round-trips to a structurally equal
// dataset, and equal datasets serialize to identical bytes.
std::string serialize_users(const Dataset& d);
std::string serialize_tweets(const Dataset& d);
std::string serialize_edges(const Dataset& d);
void save_dataset(const Dataset& d, const std::filesystem::path& dir);
Dataset load_dataset_dir(const std::filesystem::path& dir, LoadStats* stats = nullptr);

std::uint64_t dataset_digest(const Dataset& d);

// Induced subgraph over the given users (edges with both endpoints inside).
Dataset induced_subset(const Dataset& d, const std::vector<std::string>& ids);

// Adjacency helpers (deduplicated, indices into d.users, ascending).
std::vector<std::vector<int>> in_neighbors(const Dataset& d, Relation r);
std::vector<std::vector<int>> out_neighbors(const Dataset& d, Relation r);
// Followees under either relation; used where "followed accounts" matters.
std::vector<std::vector<int>> out_neighbors_any(const Dataset& d);

// ---------------------------------------------------------------------------
// Communities
// ---------------------------------------------------------------------------

// Newman modularity of an assignment on the unit-weight undirected simple
// projection of the edge set, with a resolution parameter gamma:
//   Q = sum_c [ e_c / m  -  gamma * (a_c / 2m)^2 ]
// An empty projection yields Q = 0. Every user must be assigned.
double modularity(const Dataset& d, const std::vector<int>& assignment,
                  double resolution = 1.0);

struct CommunityPartition {
  std::vector<int> community;            // by user index; dense ids from 0
  double modularity = 0.0;
  std::vector<double> pass_modularity;   // after each Louvain pass; non-decreasing
  int community_count() const;
};

// Louvain: seeded sweep order, deterministic tie-breaking, local moves plus
// aggregation until no move improves modularity.
CommunityPartition detect_communities(const Dataset& d, std::uint64_t seed,
                                      double resolution = 1.0);

// Fraction of user pairs on which two assignments agree about being grouped
// together; 1.0 means identical groupings up to relabeling.
double pairwise_agreement(const std::vector<int>& a, const std::vector<int>& b);

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitIds {
  std::vector<std::string> train, val, test;
};

// Stratified by label with largest-remainder rounding, so each split's class
// counts are within one of the exact quota. Seeded shuffle within classes.
SplitIds split_dataset(const Dataset& d, double r_train, double r_val, double r_test,
                       std::uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic fixture
// ---------------------------------------------------------------------------

struct FixtureConfig {
  int n_users = 300;
  double bot_fraction = 0.2;
  // Mean out-degree is roughly edge_density * n_users / 2 via preferential
  // attachment; every non-seed node gets at least one followee.
  double edge_density = 0.02;
  int topics = 8;
  int words_per_topic = 20;
  std::uint64_t seed = 0;
};

// Labeled accounts whose tweet text is distinguishable by construction: human
// tweets come from per-user topic mixtures, bot tweets from a promotional
// template vocabulary. Profile metadata overlaps heavily between classes so
// tweets carry the dominant signal.
Dataset synth_fixture(const FixtureConfig& cfg);

}  // namespace botarena::corpus
