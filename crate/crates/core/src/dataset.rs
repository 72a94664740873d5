//! Interaction logs → day-sessions → chronological splits with price levels.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Interaction {
    pub user_tag: String,
    pub item_id: u32,
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
    pub price: f64,
    pub category_id: u32,
}

/// Items in timestamp order; the last one is the prediction target.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub items: Vec<u32>,
    pub end_time: f64,
}

impl Session {
    pub fn new(items: Vec<u32>, end_time: f64) -> Self {
        Self { items, end_time }
    }

    pub fn context(&self) -> &[u32] {
        &self.items[..self.items.len() - 1]
    }

    pub fn target(&self) -> u32 {
        *self.items.last().expect("sessions hold at least two items")
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CategoryPriceRange {
    pub category_id: u32,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ItemRecord {
    pub id: u32,
    pub category_id: u32,
    pub price: f64,
    pub price_level: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub min_item_freq: usize,
    pub rho: usize,
    pub ratios: [usize; 3],
    /// Clamp prices outside their category's training range instead of failing.
    pub clamp_price: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            min_item_freq: 5,
            rho: 100,
            ratios: [7, 2, 1],
            clamp_price: true,
        }
    }
}

/// `floor((price - min) / (max - min) * rho)`, clamped to `rho - 1`.
pub fn encode_price_level(price: f64, range: &CategoryPriceRange, rho: usize) -> Result<usize> {
    if rho == 0 {
        return Err(Error::Config("rho must be at least 1".into()));
    }
    if !(range.min..=range.max).contains(&price) {
        return Err(Error::PriceOutOfRange {
            price,
            min: range.min,
            max: range.max,
        });
    }
    if range.max == range.min {
        return Ok(0);
    }
    let level = ((price - range.min) / (range.max - range.min) * rho as f64).floor() as usize;
    Ok(level.min(rho - 1))
}

/// One session per `(user_tag, UTC day)`, ordered by timestamp. Items seen
/// fewer than `min_item_freq` times across all interactions are dropped once,
/// then sessions shorter than two items are discarded. The result is sorted
/// by end time, ties kept in order of first appearance.
pub fn build_sessions(interactions: &[Interaction], min_item_freq: usize) -> Result<Vec<Session>> {
    if interactions.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut freq: HashMap<u32, usize> = HashMap::new();
    for it in interactions {
        *freq.entry(it.item_id).or_default() += 1;
    }

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot: HashMap<(&str, i64), usize> = HashMap::new();
    for (i, it) in interactions.iter().enumerate() {
        let day = (it.timestamp / SECONDS_PER_DAY).floor() as i64;
        let g = *slot.entry((it.user_tag.as_str(), day)).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }

    let mut sessions = Vec::new();
    for mut members in groups {
        members.sort_by(|&a, &b| interactions[a].timestamp.total_cmp(&interactions[b].timestamp));
        members.retain(|&i| freq[&interactions[i].item_id] >= min_item_freq);
        if members.len() < 2 {
            continue;
        }
        let end_time = interactions[*members.last().expect("non-empty")].timestamp;
        let items = members.iter().map(|&i| interactions[i].item_id).collect();
        sessions.push(Session::new(items, end_time));
    }
    if sessions.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    sessions.sort_by(|a, b| a.end_time.total_cmp(&b.end_time));
    Ok(sessions)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChronoSplit {
    pub train: Vec<Session>,
    pub val: Vec<Session>,
    /// Test sessions whose items all occur in `train`.
    pub test: Vec<Session>,
    /// The full chronological test block before unseen-item removal.
    pub test_raw: Vec<Session>,
}

/// Contiguous blocks in the given proportions. Sessions must already be in
/// chronological order; the sort here is stable so equal end times keep
/// their input order.
pub fn split_chronological(sessions: &[Session], ratios: [usize; 3]) -> Result<ChronoSplit> {
    let n = sessions.len();
    if n < 3 {
        return Err(Error::TooFewSessions(n));
    }
    let total: usize = ratios.iter().sum();
    if total == 0 {
        return Err(Error::Config("split ratios sum to zero".into()));
    }
    let mut ordered = sessions.to_vec();
    ordered.sort_by(|a, b| a.end_time.total_cmp(&b.end_time));

    let mut n_train = (n * ratios[0] / total).max(1);
    let mut n_val = n * ratios[1] / total;
    if ratios[1] > 0 && n_val == 0 {
        n_val = 1;
        n_train = n_train.saturating_sub(1).max(1);
    }
    if n_train + n_val >= n {
        n_train = n_train.min(n - 2);
        n_val = n - 1 - n_train;
    }
    let test_raw = ordered.split_off(n_train + n_val);
    let val = ordered.split_off(n_train);
    let train = ordered;

    let seen = items_of(&train);
    let test = test_raw
        .iter()
        .filter(|s| s.items.iter().all(|i| seen.contains(i)))
        .cloned()
        .collect();
    Ok(ChronoSplit {
        train,
        val,
        test,
        test_raw,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColdStartSplit {
    pub sessions: Vec<Session>,
    /// Items present in `sessions` but absent from training.
    pub cold_items: BTreeSet<u32>,
}

/// Keeps every raw test session, including those touching items never seen
/// in training, and flags those items as cold.
pub fn make_cold_start_variant(train: &[Session], test_raw: &[Session]) -> ColdStartSplit {
    let seen = items_of(train);
    let cold_items = test_raw
        .iter()
        .flat_map(|s| s.items.iter().copied())
        .filter(|i| !seen.contains(i))
        .collect();
    ColdStartSplit {
        sessions: test_raw.to_vec(),
        cold_items,
    }
}

pub fn items_of(sessions: &[Session]) -> BTreeSet<u32> {
    sessions.iter().flat_map(|s| s.items.iter().copied()).collect()
}

/// Sessions, splits and the item catalog. Catalog rows are sorted by item id;
/// embedding matrices use the same row order.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionCorpus {
    pub items: Vec<ItemRecord>,
    pub categories: Vec<CategoryPriceRange>,
    pub sessions_train: Vec<Session>,
    pub sessions_val: Vec<Session>,
    pub sessions_test: Vec<Session>,
    pub sessions_test_plus: Vec<Session>,
    pub cold_items: BTreeSet<u32>,
    pub rho: usize,
}

impl SessionCorpus {
    /// Runs the whole preprocessing chain on a raw log.
    pub fn from_interactions(interactions: &[Interaction], cfg: &CorpusConfig) -> Result<Self> {
        let sessions = build_sessions(interactions, cfg.min_item_freq)?;
        let split = split_chronological(&sessions, cfg.ratios)?;
        let cold = make_cold_start_variant(&split.train, &split.test_raw);

        let mut used = items_of(&split.train);
        used.extend(items_of(&split.val));
        used.extend(items_of(&split.test_raw));

        // first observed (price, category) per item, in time order
        let mut order: Vec<usize> = (0..interactions.len()).collect();
        order.sort_by(|&a, &b| interactions[a].timestamp.total_cmp(&interactions[b].timestamp));
        let mut first: BTreeMap<u32, (f64, u32)> = BTreeMap::new();
        for i in order {
            let it = &interactions[i];
            if used.contains(&it.item_id) {
                first.entry(it.item_id).or_insert((it.price, it.category_id));
            }
        }

        let train_items = items_of(&split.train);
        let mut ranges: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
        for (&id, &(price, cat)) in &first {
            if train_items.contains(&id) {
                let r = ranges.entry(cat).or_insert((price, price));
                r.0 = r.0.min(price);
                r.1 = r.1.max(price);
            }
        }
        // a category with no training items falls back to its full range
        for &(price, cat) in first.values() {
            if !ranges.contains_key(&cat) {
                let all = first.values().filter(|(_, c)| *c == cat).map(|(p, _)| *p);
                let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    (lo.min(p), hi.max(p))
                });
                ranges.insert(cat, (lo.min(price), hi.max(price)));
            }
        }
        let categories: Vec<CategoryPriceRange> = ranges
            .iter()
            .map(|(&category_id, &(min, max))| CategoryPriceRange { category_id, min, max })
            .collect();

        let mut items = Vec::with_capacity(first.len());
        for (&id, &(price, category_id)) in &first {
            let range = categories
                .iter()
                .find(|c| c.category_id == category_id)
                .expect("every category has a range");
            let clamped = if cfg.clamp_price {
                price.clamp(range.min, range.max)
            } else {
                price
            };
            items.push(ItemRecord {
                id,
                category_id,
                price,
                price_level: encode_price_level(clamped, range, cfg.rho)?,
            });
        }

        Ok(Self {
            items,
            categories,
            sessions_train: split.train,
            sessions_val: split.val,
            sessions_test: split.test,
            sessions_test_plus: cold.sessions,
            cold_items: cold.cold_items,
            rho: cfg.rho,
        })
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    /// Catalog row of an item id.
    pub fn index_of(&self, id: u32) -> Result<usize> {
        self.items
            .binary_search_by_key(&id, |r| r.id)
            .map_err(|_| Error::UnknownItem(id))
    }

    pub fn category_index(&self, category_id: u32) -> Result<usize> {
        self.categories
            .binary_search_by_key(&category_id, |c| c.category_id)
            .map_err(|_| Error::UnknownCategory(category_id))
    }

    /// Catalog rows of a session's items.
    pub fn encode(&self, s: &Session) -> Result<Vec<usize>> {
        s.items.iter().map(|&i| self.index_of(i)).collect()
    }

    pub fn encode_all(&self, sessions: &[Session]) -> Result<Vec<Vec<usize>>> {
        sessions.iter().map(|s| self.encode(s)).collect()
    }

    /// Per catalog row: (price level, category index).
    pub fn price_features(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        let levels = self.items.iter().map(|r| r.price_level).collect();
        let cats = self
            .items
            .iter()
            .map(|r| self.category_index(r.category_id))
            .collect::<Result<_>>()?;
        Ok((levels, cats))
    }

    /// Catalog rows of items that occur in the training split.
    pub fn train_rows(&self) -> Vec<usize> {
        let seen = items_of(&self.sessions_train);
        (0..self.items.len())
            .filter(|&r| seen.contains(&self.items[r].id))
            .collect()
    }

    pub fn cold_rows(&self) -> BTreeSet<usize> {
        self.cold_items
            .iter()
            .filter_map(|&id| self.index_of(id).ok())
            .collect()
    }

    /// Writes `items.csv`, `categories.csv`, `corpus.txt` and one
    /// `<split>.txt` per split (space-separated ids, last = target).
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("items.csv"))?;
        w.write_record(["item_id", "category_id", "price", "price_level"])?;
        for r in &self.items {
            w.write_record([
                r.id.to_string(),
                r.category_id.to_string(),
                r.price.to_string(),
                r.price_level.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("categories.csv"))?;
        w.write_record(["category_id", "min", "max"])?;
        for c in &self.categories {
            w.write_record([c.category_id.to_string(), c.min.to_string(), c.max.to_string()])?;
        }
        w.flush()?;

        for (name, sessions) in self.splits() {
            write_sessions(&dir.join(format!("{name}.txt")), sessions)?;
        }
        fs::write(
            dir.join("corpus.txt"),
            format!(
                "rho={}\nn_items={}\nn_train={}\nn_val={}\nn_test={}\nn_test_plus={}\n",
                self.rho,
                self.items.len(),
                self.sessions_train.len(),
                self.sessions_val.len(),
                self.sessions_test.len(),
                self.sessions_test_plus.len()
            ),
        )?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("corpus.txt");
        let meta = fs::read_to_string(&meta_path)?;
        let rho = meta
            .lines()
            .find_map(|l| l.strip_prefix("rho="))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::BadFile {
                path: meta_path.clone(),
                msg: "missing `rho=`".into(),
            })?;

        let items_path = dir.join("items.csv");
        let mut items = Vec::new();
        for (row, rec) in csv::Reader::from_path(&items_path)?.records().enumerate() {
            let rec = rec?;
            let bad = |msg: &str| Error::BadRow {
                path: items_path.clone(),
                row: row + 1,
                msg: msg.into(),
            };
            let field = |i: usize| rec.get(i).ok_or_else(|| bad("missing column"));
            items.push(ItemRecord {
                id: field(0)?.parse().map_err(|_| bad("bad item_id"))?,
                category_id: field(1)?.parse().map_err(|_| bad("bad category_id"))?,
                price: field(2)?.parse().map_err(|_| bad("bad price"))?,
                price_level: field(3)?.parse().map_err(|_| bad("bad price_level"))?,
            });
        }
        items.sort_by_key(|r| r.id);

        let cat_path = dir.join("categories.csv");
        let mut categories = Vec::new();
        for (row, rec) in csv::Reader::from_path(&cat_path)?.records().enumerate() {
            let rec = rec?;
            let bad = || Error::BadRow {
                path: cat_path.clone(),
                row: row + 1,
                msg: "expected category_id,min,max".into(),
            };
            let f = |i: usize| rec.get(i).ok_or_else(bad);
            categories.push(CategoryPriceRange {
                category_id: f(0)?.parse().map_err(|_| bad())?,
                min: f(1)?.parse().map_err(|_| bad())?,
                max: f(2)?.parse().map_err(|_| bad())?,
            });
        }
        categories.sort_by_key(|c| c.category_id);

        let train = read_sessions(&dir.join("train.txt"))?;
        let val = read_sessions(&dir.join("val.txt"))?;
        let test = read_sessions(&dir.join("test.txt"))?;
        let test_plus = read_sessions(&dir.join("test_plus.txt"))?;
        let cold = make_cold_start_variant(&train, &test_plus);
        Ok(Self {
            items,
            categories,
            sessions_train: train,
            sessions_val: val,
            sessions_test: test,
            sessions_test_plus: test_plus,
            cold_items: cold.cold_items,
            rho,
        })
    }

    fn splits(&self) -> [(&'static str, &[Session]); 4] {
        [
            ("train", &self.sessions_train),
            ("val", &self.sessions_val),
            ("test", &self.sessions_test),
            ("test_plus", &self.sessions_test_plus),
        ]
    }
}

pub fn write_sessions(path: &Path, sessions: &[Session]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in sessions {
        let line: Vec<String> = s.items.iter().map(u32::to_string).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a session file; `end_time` is the line index.
pub fn read_sessions(path: &Path) -> Result<Vec<Session>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let items = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<Vec<u32>, _>>()
            .map_err(|e| Error::BadRow {
                path: path.into(),
                row: i + 1,
                msg: e.to_string(),
            })?;
        if items.len() < 2 {
            return Err(Error::BadRow {
                path: path.into(),
                row: i + 1,
                msg: "a session needs a context item and a target".into(),
            });
        }
        out.push(Session::new(items, i as f64));
    }
    Ok(out)
}

pub fn read_interactions(path: &Path) -> Result<Vec<Interaction>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != ["user_tag", "item_id", "timestamp", "price", "category_id"] {
        return Err(Error::BadFile {
            path: path.into(),
            msg: format!("unexpected header {header:?}"),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let bad = |msg: String| Error::BadInteraction { line, msg };
        let f = |k: usize| rec.get(k).ok_or_else(|| bad("missing column".into()));
        let it = Interaction {
            user_tag: f(0)?.to_string(),
            item_id: f(1)?.parse().map_err(|e| bad(format!("item_id: {e}")))?,
            timestamp: f(2)?.parse().map_err(|e| bad(format!("timestamp: {e}")))?,
            price: f(3)?.parse().map_err(|e| bad(format!("price: {e}")))?,
            category_id: f(4)?.parse().map_err(|e| bad(format!("category_id: {e}")))?,
        };
        if !it.timestamp.is_finite() {
            return Err(bad("timestamp is not finite".into()));
        }
        if !(it.price > 0.0 && it.price.is_finite()) {
            return Err(bad(format!("price must be positive, got {}", it.price)));
        }
        out.push(it);
    }
    Ok(out)
}

pub fn write_interactions(path: &Path, interactions: &[Interaction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["user_tag", "item_id", "timestamp", "price", "category_id"])?;
    for it in interactions {
        w.write_record([
            it.user_tag.clone(),
            it.item_id.to_string(),
            it.timestamp.to_string(),
            it.price.to_string(),
            it.category_id.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn range(min: f64, max: f64) -> CategoryPriceRange {
        CategoryPriceRange {
            category_id: 0,
            min,
            max,
        }
    }

    fn event(user: &str, item: u32, ts: f64) -> Interaction {
        Interaction {
            user_tag: user.into(),
            item_id: item,
            timestamp: ts,
            price: 10.0,
            category_id: 0,
        }
    }

    #[test]
    fn price_level_examples() {
        assert_eq!(encode_price_level(25.0, &range(0.0, 100.0), 100).unwrap(), 25);
        assert_eq!(encode_price_level(100.0, &range(0.0, 100.0), 100).unwrap(), 99);
        assert_eq!(encode_price_level(7.5, &range(5.0, 10.0), 100).unwrap(), 50);
        assert_eq!(encode_price_level(3.0, &range(3.0, 3.0), 100).unwrap(), 0);
        assert!(matches!(
            encode_price_level(101.0, &range(0.0, 100.0), 100),
            Err(Error::PriceOutOfRange { .. })
        ));
    }

    #[test]
    fn same_day_events_form_one_session() {
        let log = vec![event("a", 1, 30.0), event("a", 2, 10.0), event("a", 3, 20.0)];
        let s = build_sessions(&log, 1).unwrap();
        assert_eq!(s, vec![Session::new(vec![2, 3, 1], 30.0)]);
        assert_eq!(s[0].context(), &[2, 3]);
        assert_eq!(s[0].target(), 1);
    }

    #[test]
    fn single_event_day_emits_nothing() {
        let log = vec![
            event("a", 1, 10.0),
            event("a", 2, 20.0),
            event("a", 3, SECONDS_PER_DAY + 5.0),
        ];
        let s = build_sessions(&log, 1).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].items, vec![1, 2]);
        let lonely = vec![event("b", 1, 0.0)];
        assert!(matches!(build_sessions(&lonely, 1), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn rare_items_are_removed_before_length_filter() {
        let mut log = Vec::new();
        for u in 0..5 {
            log.push(event(&format!("u{u}"), 1, 100.0 * u as f64));
            log.push(event(&format!("u{u}"), 2, 100.0 * u as f64 + 1.0));
        }
        log.push(event("x", 1, 1000.0));
        log.push(event("x", 9, 1001.0));
        let s = build_sessions(&log, 5).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.iter().all(|s| s.items == [1, 2]));
    }

    #[test]
    fn split_of_ten_is_seven_two_one() {
        let sessions: Vec<Session> = (0..10).map(|i| Session::new(vec![1, 2], i as f64)).collect();
        let sp = split_chronological(&sessions, [7, 2, 1]).unwrap();
        assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (7, 2, 1));
        assert!(split_chronological(&sessions[..2], [7, 2, 1]).is_err());
    }

    #[test]
    fn equal_end_times_keep_input_order() {
        let sessions: Vec<Session> = (0..10).map(|i| Session::new(vec![i, i + 1], 5.0)).collect();
        let sp = split_chronological(&sessions, [7, 2, 1]).unwrap();
        let order: Vec<u32> = sp
            .train
            .iter()
            .chain(&sp.val)
            .chain(&sp.test_raw)
            .map(|s| s.items[0])
            .collect();
        assert_eq!(order, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn cold_variant_identity_without_unseen_items() {
        let train = vec![Session::new(vec![1, 2, 3], 0.0)];
        let test = vec![Session::new(vec![3, 1], 1.0)];
        let cold = make_cold_start_variant(&train, &test);
        assert_eq!(cold.sessions, test);
        assert!(cold.cold_items.is_empty());

        let test = vec![Session::new(vec![3, 7], 1.0)];
        let cold = make_cold_start_variant(&train, &test);
        assert_eq!(cold.sessions.len(), 1);
        assert_eq!(cold.cold_items, BTreeSet::from([7]));
    }
}
