//! Catalog and event-log parsing, option generation, and dataset statistics.
//!
//! Formats are line oriented:
//!
//! - items CSV: `item_id,price`
//! - bundles JSON lines: `{"bundle_id":…,"price":…,"items":[…]}`
//! - events JSON lines: `{"user":…,"kind":"item"|"bundle","id":…,"playtime":{"<item id>":hours}}`
//! - records CSV: `user_id,main_item_id,bundle_id,label`

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::catalog::{Bundle, BundleId, Catalog, ChoiceRecord, Item, ItemId, Label, UserId};
use crate::error::{ProbeError, Result};

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> ProbeError {
    ProbeError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| parse_err(path, 0, e.to_string()))
}

/// Reads `item_id,price` rows. `origin` only labels error messages.
pub fn read_items(reader: impl Read, origin: &Path) -> Result<Vec<Item>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut items = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(origin, line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != 2 {
            return Err(parse_err(origin, line, format!("expected 2 fields, found {}", row.len())));
        }
        let id = row[0]
            .parse::<ItemId>()
            .map_err(|e| parse_err(origin, line, format!("item_id {:?}: {e}", &row[0])))?;
        let price = row[1]
            .parse::<f64>()
            .map_err(|e| parse_err(origin, line, format!("price {:?}: {e}", &row[1])))?;
        items.push(Item { id, price });
    }
    Ok(items)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleLine {
    bundle_id: BundleId,
    price: f64,
    items: Vec<ItemId>,
}

fn read_json_lines<T: for<'de> Deserialize<'de>>(reader: impl Read, origin: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| parse_err(origin, idx + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_err(origin, idx + 1, e.to_string()))?);
    }
    Ok(out)
}

pub fn read_bundles(reader: impl Read, origin: &Path) -> Result<Vec<Bundle>> {
    let lines: Vec<BundleLine> = read_json_lines(reader, origin)?;
    Ok(lines
        .into_iter()
        .map(|b| Bundle::new(b.bundle_id, b.items, b.price))
        .collect())
}

/// Loads and validates a catalog. Bundles that break the pricing assumptions
/// are kept but flagged; see [`Catalog::flagged`].
pub fn load_catalog(items_path: &Path, bundles_path: &Path) -> Result<Catalog> {
    let items = read_items(open(items_path)?, items_path)?;
    let bundles = read_bundles(open(bundles_path)?, bundles_path)?;
    let catalog = Catalog::new(items, bundles)?;
    for f in catalog.flagged() {
        log::warn!("bundle {} flagged: {}", f.bundle_id, f.reason);
    }
    Ok(catalog)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Item,
    Bundle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEvent {
    pub user: UserId,
    pub kind: EventKind,
    pub id: u64,
    /// Hours played per item id.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub playtime: BTreeMap<ItemId, f64>,
}

pub fn read_events(reader: impl Read, origin: &Path) -> Result<Vec<RawEvent>> {
    let events: Vec<RawEvent> = read_json_lines(reader, origin)?;
    for (i, e) in events.iter().enumerate() {
        if e.playtime.values().any(|h| !(*h >= 0.0) || !h.is_finite()) {
            return Err(parse_err(origin, i + 1, "playtime must be a nonnegative number"));
        }
    }
    Ok(events)
}

pub fn load_events(path: &Path) -> Result<Vec<RawEvent>> {
    read_events(open(path)?, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscardReason {
    UnknownItem,
    UnknownBundle,
    FlaggedBundle,
    /// No valid bundle contains the purchased item.
    NoContainingBundle,
    /// The alternative bundle is not more expensive than the main item.
    BundleNotAboveMain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Discarded {
    pub event_index: usize,
    pub user: UserId,
    pub reason: DiscardReason,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Derivation {
    pub records: Vec<ChoiceRecord>,
    pub discarded: Vec<Discarded>,
}

impl Derivation {
    pub fn discard_counts(&self) -> BTreeMap<DiscardReason, usize> {
        let mut m = BTreeMap::new();
        for d in &self.discarded {
            *m.entry(d.reason).or_default() += 1;
        }
        m
    }
}

/// Member with the longest playtime; ties and missing playtime go to the
/// lowest item id.
pub fn main_item_of(bundle: &Bundle, playtime: &BTreeMap<ItemId, f64>) -> ItemId {
    let mut best = bundle.items[0];
    let mut best_hours = playtime.get(&best).copied().unwrap_or(0.0);
    for &i in &bundle.items[1..] {
        let h = playtime.get(&i).copied().unwrap_or(0.0);
        if h > best_hours {
            best = i;
            best_hours = h;
        }
    }
    best
}

/// Turns purchase events into bundle-versus-item choices.
///
/// A bundle purchase yields its longest-played member as main item with label
/// `BoughtBundle`. An item purchase yields the cheapest valid bundle containing
/// it as alternative with label `BoughtItem`. Events that cannot form a valid
/// choice are listed in [`Derivation::discarded`]. Output order follows input
/// order.
pub fn derive_choice_records(events: &[RawEvent], catalog: &Catalog) -> Derivation {
    let mut out = Derivation::default();
    for (event_index, e) in events.iter().enumerate() {
        let mut discard = |reason| {
            out.discarded.push(Discarded {
                event_index,
                user: e.user,
                reason,
            })
        };
        let (main, bundle, label) = match e.kind {
            EventKind::Bundle => {
                let Ok(bundle) = catalog.bundle(e.id) else {
                    discard(DiscardReason::UnknownBundle);
                    continue;
                };
                if catalog.is_flagged(bundle.id) {
                    discard(DiscardReason::FlaggedBundle);
                    continue;
                }
                (main_item_of(bundle, &e.playtime), bundle, Label::BoughtBundle)
            }
            EventKind::Item => {
                let id = e.id as ItemId;
                if catalog.item(id).is_err() {
                    discard(DiscardReason::UnknownItem);
                    continue;
                }
                let Some(bundle) = catalog.cheapest_bundle_containing(id) else {
                    discard(DiscardReason::NoContainingBundle);
                    continue;
                };
                (id, bundle, Label::BoughtItem)
            }
        };
        let c_m = catalog.items()[main].price;
        if !(bundle.price > c_m) {
            discard(DiscardReason::BundleNotAboveMain);
            continue;
        }
        out.records.push(ChoiceRecord {
            user_id: e.user,
            main_item_id: main,
            bundle_id: bundle.id,
            label,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub bundles: usize,
    pub items_in_bundles: usize,
    pub events: usize,
    pub purchase_records: usize,
    pub bundle_purchases: usize,
    pub item_purchases: usize,
    pub records_per_user: f64,
    pub discarded: usize,
}

pub fn dataset_stats(records: &[ChoiceRecord], events: &[RawEvent], catalog: &Catalog) -> DatasetStats {
    let users: BTreeSet<UserId> = records.iter().map(|r| r.user_id).collect();
    let bundle_purchases = records.iter().filter(|r| r.label.is_bundle()).count();
    DatasetStats {
        users: users.len(),
        items: catalog.n_items(),
        bundles: catalog.n_bundles(),
        items_in_bundles: catalog.n_items_in_bundles(),
        events: events.len(),
        purchase_records: records.len(),
        bundle_purchases,
        item_purchases: records.len() - bundle_purchases,
        records_per_user: if users.is_empty() {
            0.0
        } else {
            records.len() as f64 / users.len() as f64
        },
        discarded: events.len().saturating_sub(records.len()),
    }
}

pub fn write_records(writer: impl Write, records: &[ChoiceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["user_id", "main_item_id", "bundle_id", "label"])?;
    for r in records {
        w.write_record([
            r.user_id.to_string(),
            r.main_item_id.to_string(),
            r.bundle_id.to_string(),
            r.label.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(reader: impl Read, origin: &Path) -> Result<Vec<ChoiceRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(origin, line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != 4 {
            return Err(parse_err(origin, line, format!("expected 4 fields, found {}", row.len())));
        }
        let field = |i: usize, name: &str| -> Result<u64> {
            row[i]
                .parse::<u64>()
                .map_err(|e| parse_err(origin, line, format!("{name} {:?}: {e}", &row[i])))
        };
        out.push(ChoiceRecord {
            user_id: field(0, "user_id")?,
            main_item_id: field(1, "main_item_id")? as ItemId,
            bundle_id: field(2, "bundle_id")?,
            label: row[3].parse().map_err(|e: String| parse_err(origin, line, e))?,
        });
    }
    Ok(out)
}

pub fn load_records(path: &Path) -> Result<Vec<ChoiceRecord>> {
    read_records(open(path)?, path)
}

/// Checks every record against the catalog: known ids, main item in bundle,
/// bundle not flagged.
pub fn validate_records(records: &[ChoiceRecord], catalog: &Catalog) -> Result<()> {
    for r in records {
        catalog.item(r.main_item_id)?;
        let b = catalog.bundle(r.bundle_id)?;
        if !b.contains(r.main_item_id) {
            return Err(ProbeError::MainItemNotInBundle {
                item: r.main_item_id,
                bundle: r.bundle_id,
            });
        }
        if catalog.is_flagged(r.bundle_id) {
            return Err(ProbeError::Validation(format!("record uses flagged bundle {}", r.bundle_id)));
        }
    }
    Ok(())
}

pub fn write_items(writer: impl Write, items: &[Item]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["item_id", "price"])?;
    for i in items {
        w.write_record([i.id.to_string(), i.price.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_json_lines<T: Serialize>(mut writer: impl Write, rows: impl IntoIterator<Item = T>) -> Result<()> {
    for row in rows {
        serde_json::to_writer(&mut writer, &row)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_bundles<'a>(writer: impl Write, bundles: impl IntoIterator<Item = &'a Bundle>) -> Result<()> {
    write_json_lines(
        writer,
        bundles.into_iter().map(|b| BundleLine {
            bundle_id: b.id,
            price: b.price,
            items: b.items.clone(),
        }),
    )
}

pub fn write_events(writer: impl Write, events: &[RawEvent]) -> Result<()> {
    write_json_lines(writer, events)
}

/// File locations of one dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPaths {
    pub items: PathBuf,
    pub bundles: PathBuf,
    pub events: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            items: dir.join("items.csv"),
            bundles: dir.join("bundles.jsonl"),
            events: dir.join("events.jsonl"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn origin() -> &'static Path {
        Path::new("<mem>")
    }

    fn catalog() -> Catalog {
        let items = read_items("item_id,price\n0,10\n1,6\n2,5\n3,4\n".as_bytes(), origin()).unwrap();
        let bundles = read_bundles(
            concat!(
                r#"{"bundle_id":1,"price":15,"items":[0,1]}"#,
                "\n",
                r#"{"bundle_id":2,"price":12,"items":[0,2]}"#,
                "\n",
                r#"{"bundle_id":3,"price":30,"items":[1,2]}"#,
                "\n"
            )
            .as_bytes(),
            origin(),
        )
        .unwrap();
        Catalog::new(items, bundles).unwrap()
    }

    fn event(user: UserId, kind: EventKind, id: u64, playtime: &[(ItemId, f64)]) -> RawEvent {
        RawEvent {
            user,
            kind,
            id,
            playtime: playtime.iter().copied().collect(),
        }
    }

    #[test]
    fn load_catalog_examples() {
        let items = read_items("item_id,price\n0,10\n1,5\n".as_bytes(), origin()).unwrap();
        let b = read_bundles(r#"{"bundle_id":0,"price":12,"items":[0,1]}"#.as_bytes(), origin()).unwrap();
        let cat = Catalog::new(items.clone(), b).unwrap();
        assert_eq!(cat.n_bundles(), 1);
        assert!(cat.flagged().is_empty());

        let over = read_bundles(r#"{"bundle_id":0,"price":16,"items":[0,1]}"#.as_bytes(), origin()).unwrap();
        assert_eq!(Catalog::new(items.clone(), over).unwrap().flagged().len(), 1);

        let dangling = read_bundles(r#"{"bundle_id":0,"price":12,"items":[0,7]}"#.as_bytes(), origin()).unwrap();
        assert!(Catalog::new(items, dangling).is_err());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = read_items("item_id,price\n0,10\n1,abc\n".as_bytes(), origin()).unwrap_err();
        assert!(matches!(err, ProbeError::Parse { line: 3, .. }), "{err}");
        let text = format!("{}\n{}\n", r#"{"bundle_id":0,"price":12,"items":[0,1]}"#, "{not json");
        let err = read_bundles(text.as_bytes(), origin()).unwrap_err();
        assert!(matches!(err, ProbeError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn bundle_purchase_uses_longest_played_member() {
        let cat = catalog();
        let d = derive_choice_records(&[event(5, EventKind::Bundle, 1, &[(0, 10.0), (1, 3.0)])], &cat);
        assert_eq!(
            d.records,
            vec![ChoiceRecord {
                user_id: 5,
                main_item_id: 0,
                bundle_id: 1,
                label: Label::BoughtBundle
            }]
        );
        // ties and missing playtime go to the lowest id
        let d = derive_choice_records(&[event(5, EventKind::Bundle, 1, &[(0, 2.0), (1, 2.0)]), event(5, EventKind::Bundle, 1, &[])], &cat);
        assert!(d.records.iter().all(|r| r.main_item_id == 0));
    }

    #[test]
    fn item_purchase_uses_cheapest_bundle() {
        let cat = catalog();
        let d = derive_choice_records(&[event(1, EventKind::Item, 0, &[])], &cat);
        assert_eq!(d.records[0].bundle_id, 2);
        assert_eq!(d.records[0].label, Label::BoughtItem);
    }

    #[test]
    fn unusable_events_are_discarded_with_reasons() {
        let cat = catalog();
        let events = [
            event(1, EventKind::Item, 3, &[]),
            event(1, EventKind::Item, 99, &[]),
            event(1, EventKind::Bundle, 42, &[]),
            event(1, EventKind::Bundle, 3, &[]),
        ];
        let d = derive_choice_records(&events, &cat);
        assert!(d.records.is_empty());
        let reasons: Vec<DiscardReason> = d.discarded.iter().map(|x| x.reason).collect();
        assert_eq!(
            reasons,
            vec![
                DiscardReason::NoContainingBundle,
                DiscardReason::UnknownItem,
                DiscardReason::UnknownBundle,
                DiscardReason::FlaggedBundle
            ]
        );
    }

    #[test]
    fn bundle_not_above_main_is_discarded() {
        let items = vec![Item { id: 0, price: 10.0 }, Item { id: 1, price: 1.0 }];
        let cat = Catalog::new(items, vec![Bundle::new(0, vec![0, 1], 9.5)]).unwrap();
        let d = derive_choice_records(&[event(1, EventKind::Item, 0, &[])], &cat);
        assert_eq!(d.discarded[0].reason, DiscardReason::BundleNotAboveMain);
    }

    #[test]
    fn stats_examples() {
        let empty = Catalog::new(vec![], vec![]).unwrap();
        assert_eq!(dataset_stats(&[], &[], &empty), DatasetStats::default());

        let cat = catalog();
        let events = [
            event(1, EventKind::Bundle, 1, &[]),
            event(1, EventKind::Bundle, 2, &[]),
            event(2, EventKind::Item, 0, &[]),
        ];
        let d = derive_choice_records(&events, &cat);
        let s = dataset_stats(&d.records, &events, &cat);
        assert_eq!((s.purchase_records, s.bundle_purchases, s.item_purchases), (3, 2, 1));
        assert_eq!(s.users, 2);
        assert_eq!(s.records_per_user, 1.5);
        assert_eq!(s.purchase_records, s.bundle_purchases + s.item_purchases);
    }

    #[test]
    fn records_roundtrip() {
        let recs = vec![
            ChoiceRecord { user_id: 3, main_item_id: 1, bundle_id: 7, label: Label::BoughtBundle },
            ChoiceRecord { user_id: 4, main_item_id: 0, bundle_id: 2, label: Label::BoughtItem },
        ];
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        assert!(buf.starts_with(b"user_id,main_item_id,bundle_id,label\n"));
        assert_eq!(read_records(buf.as_slice(), origin()).unwrap(), recs);
    }

    #[test]
    fn events_roundtrip_with_string_keys() {
        let text = r#"{"user":7,"kind":"bundle","id":1,"playtime":{"0":1.5,"1":0}}"#;
        let evs = read_events(text.as_bytes(), origin()).unwrap();
        assert_eq!(evs[0].playtime[&0], 1.5);
        let mut buf = Vec::new();
        write_events(&mut buf, &evs).unwrap();
        assert_eq!(read_events(buf.as_slice(), origin()).unwrap(), evs);
        assert!(read_events(r#"{"user":7,"kind":"bundle","id":1,"playtime":{"0":-1}}"#.as_bytes(), origin()).is_err());
    }
}
