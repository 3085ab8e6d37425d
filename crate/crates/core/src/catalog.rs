//! Catalog entities and labeled choice records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};

pub type ItemId = usize;
pub type BundleId = u64;
pub type UserId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: ItemId,
    pub price: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub id: BundleId,
    /// Sorted, deduplicated member ids.
    pub items: Vec<ItemId>,
    pub price: f64,
}

impl Bundle {
    pub fn new(id: BundleId, mut items: Vec<ItemId>, price: f64) -> Self {
        items.sort_unstable();
        items.dedup();
        Self { id, items, price }
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.items.binary_search(&item).is_ok()
    }

    /// Members other than `main`, in ascending id order.
    pub fn additional_items(&self, main: ItemId) -> impl Iterator<Item = ItemId> + '_ {
        self.items.iter().copied().filter(move |&i| i != main)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    #[serde(rename = "bundle")]
    BoughtBundle,
    #[serde(rename = "item")]
    BoughtItem,
}

impl Label {
    pub fn is_bundle(self) -> bool {
        matches!(self, Label::BoughtBundle)
    }

    /// `y_B` of the cross-entropy loss.
    pub fn y_bundle(self) -> f64 {
        if self.is_bundle() {
            1.0
        } else {
            0.0
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::BoughtBundle => "bundle",
            Label::BoughtItem => "item",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "bundle" | "BoughtBundle" | "1" => Ok(Label::BoughtBundle),
            "item" | "BoughtItem" | "0" => Ok(Label::BoughtItem),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

/// One bundle-vs-main-item decision with its observed outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceRecord {
    pub user_id: UserId,
    pub main_item_id: ItemId,
    pub bundle_id: BundleId,
    pub label: Label,
}

/// Why a bundle failed validation. Flagged bundles stay in the catalog but are
/// never offered as alternatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedBundle {
    pub bundle_id: BundleId,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Catalog {
    items: Vec<Item>,
    bundles: BTreeMap<BundleId, Bundle>,
    containing: Vec<Vec<BundleId>>,
    flagged: Vec<FlaggedBundle>,
}

impl Catalog {
    /// Builds a catalog. Item ids must be exactly `0..items.len()`; bundles must
    /// reference known items. Bundles priced at or above the sum of their
    /// members (or with fewer than two members) are flagged, not rejected.
    pub fn new(mut items: Vec<Item>, bundles: Vec<Bundle>) -> Result<Self> {
        items.sort_by_key(|i| i.id);
        for (expected, item) in items.iter().enumerate() {
            if item.id != expected {
                return Err(ProbeError::Validation(format!(
                    "item ids must be contiguous from 0; expected {expected}, found {}",
                    item.id
                )));
            }
            if !(item.price > 0.0) || !item.price.is_finite() {
                return Err(ProbeError::Validation(format!(
                    "item {} has non-positive price {}",
                    item.id, item.price
                )));
            }
        }

        let mut map = BTreeMap::new();
        let mut flagged = Vec::new();
        for bundle in bundles {
            for &member in &bundle.items {
                if member >= items.len() {
                    return Err(ProbeError::Validation(format!(
                        "bundle {} references unknown item {member}",
                        bundle.id
                    )));
                }
            }
            if map.contains_key(&bundle.id) {
                return Err(ProbeError::Validation(format!(
                    "duplicate bundle id {}",
                    bundle.id
                )));
            }
            let total: f64 = bundle.items.iter().map(|&i| items[i].price).sum();
            let reason = if bundle.items.len() < 2 {
                Some("fewer than two items".to_string())
            } else if !(bundle.price > 0.0) || !bundle.price.is_finite() {
                Some(format!("non-positive price {}", bundle.price))
            } else if bundle.price >= total {
                Some(format!(
                    "price {} is not below the member total {total}",
                    bundle.price
                ))
            } else {
                None
            };
            if let Some(reason) = reason {
                flagged.push(FlaggedBundle {
                    bundle_id: bundle.id,
                    reason,
                });
            }
            map.insert(bundle.id, bundle);
        }

        let mut containing = vec![Vec::new(); items.len()];
        for bundle in map.values() {
            if flagged.iter().any(|f| f.bundle_id == bundle.id) {
                continue;
            }
            for &member in &bundle.items {
                containing[member].push(bundle.id);
            }
        }

        Ok(Self {
            items,
            bundles: map,
            containing,
            flagged,
        })
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, id: ItemId) -> Result<&Item> {
        self.items.get(id).ok_or(ProbeError::UnknownItem(id))
    }

    pub fn price(&self, id: ItemId) -> Result<f64> {
        self.item(id).map(|i| i.price)
    }

    pub fn bundle(&self, id: BundleId) -> Result<&Bundle> {
        self.bundles.get(&id).ok_or(ProbeError::UnknownBundle(id))
    }

    pub fn bundles(&self) -> impl Iterator<Item = &Bundle> {
        self.bundles.values()
    }

    pub fn n_bundles(&self) -> usize {
        self.bundles.len()
    }

    /// Valid bundles containing `item`, in ascending bundle id order.
    pub fn bundles_containing(&self, item: ItemId) -> &[BundleId] {
        self.containing.get(item).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn flagged(&self) -> &[FlaggedBundle] {
        &self.flagged
    }

    pub fn is_flagged(&self, id: BundleId) -> bool {
        self.flagged.iter().any(|f| f.bundle_id == id)
    }

    /// Cheapest valid bundle containing `item`; price ties go to the lowest id.
    pub fn cheapest_bundle_containing(&self, item: ItemId) -> Option<&Bundle> {
        self.bundles_containing(item)
            .iter()
            .filter_map(|id| self.bundles.get(id))
            .min_by(|a, b| a.price.total_cmp(&b.price).then(a.id.cmp(&b.id)))
    }

    /// Number of distinct items that appear in at least one bundle.
    pub fn n_items_in_bundles(&self) -> usize {
        let mut seen = vec![false; self.items.len()];
        for bundle in self.bundles.values() {
            for &i in &bundle.items {
                seen[i] = true;
            }
        }
        seen.into_iter().filter(|&s| s).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(prices: &[f64]) -> Vec<Item> {
        prices
            .iter()
            .enumerate()
            .map(|(id, &price)| Item { id, price })
            .collect()
    }

    #[test]
    fn valid_bundle_is_indexed() {
        let cat = Catalog::new(items(&[10.0, 5.0]), vec![Bundle::new(7, vec![1, 0], 12.0)]).unwrap();
        assert!(cat.flagged().is_empty());
        assert_eq!(cat.bundles_containing(0), &[7]);
        assert_eq!(cat.bundle(7).unwrap().items, vec![0, 1]);
    }

    #[test]
    fn overpriced_bundle_is_flagged_and_not_offered() {
        let cat = Catalog::new(items(&[10.0, 5.0]), vec![Bundle::new(1, vec![0, 1], 16.0)]).unwrap();
        assert_eq!(cat.flagged().len(), 1);
        assert!(cat.bundles_containing(0).is_empty());
        assert!(cat.cheapest_bundle_containing(0).is_none());
    }

    #[test]
    fn dangling_member_is_an_error() {
        let err = Catalog::new(items(&[10.0]), vec![Bundle::new(1, vec![0, 3], 5.0)]).unwrap_err();
        assert!(matches!(err, ProbeError::Validation(_)));
    }

    #[test]
    fn cheapest_bundle_breaks_ties_by_id() {
        let cat = Catalog::new(
            items(&[10.0, 5.0, 6.0, 7.0]),
            vec![
                Bundle::new(4, vec![0, 1], 12.0),
                Bundle::new(2, vec![0, 2], 12.0),
                Bundle::new(1, vec![0, 3], 15.0),
            ],
        )
        .unwrap();
        assert_eq!(cat.cheapest_bundle_containing(0).unwrap().id, 2);
    }

    #[test]
    fn non_contiguous_ids_rejected() {
        let bad = vec![Item { id: 0, price: 1.0 }, Item { id: 2, price: 1.0 }];
        assert!(Catalog::new(bad, vec![]).is_err());
    }
}
