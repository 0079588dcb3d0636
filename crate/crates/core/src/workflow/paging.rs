use super::Paging;

/// Composition of one task page: positions into the caller's preference-ordered
/// gold and regular pools.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PagePlan {
    pub gold: Vec<usize>,
    pub regular: Vec<usize>,
}

impl PagePlan {
    pub fn len(&self) -> usize {
        self.gold.len() + self.regular.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Picks the units of page `page_index` (0-based) from pools of
/// `gold_available` and `regular_available` candidates. Returns `None` past
/// `max_pages`. Short pools yield short pages rather than substituting one
/// kind for the other, so the gold ratio never drifts upward.
pub fn build_page(
    paging: &Paging,
    page_index: u32,
    gold_available: usize,
    regular_available: usize,
) -> Option<PagePlan> {
    if page_index >= paging.max_pages {
        return None;
    }
    let per_page = paging.units_per_page as usize;
    let gold_wanted = if page_index == 0 && paging.first_page_all_gold {
        per_page
    } else {
        (paging.gold_per_page as usize).min(per_page)
    };
    let gold = gold_wanted.min(gold_available);
    let regular = (per_page - gold_wanted).min(regular_available);
    Some(PagePlan {
        gold: (0..gold).collect(),
        regular: (0..regular).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const PAGING: Paging = Paging {
        units_per_page: 3,
        gold_per_page: 1,
        first_page_all_gold: true,
        max_pages: 4,
    };

    #[test]
    fn first_page_all_gold_then_mixed() {
        assert_eq!(build_page(&PAGING, 0, 10, 10).unwrap().gold.len(), 3);
        let p = build_page(&PAGING, 1, 10, 10).unwrap();
        assert_eq!((p.gold.len(), p.regular.len()), (1, 2));
    }

    #[test]
    fn stops_at_max_pages_and_handles_short_pools() {
        assert!(build_page(&PAGING, 4, 10, 10).is_none());
        let p = build_page(&PAGING, 2, 0, 1).unwrap();
        assert_eq!((p.gold.len(), p.regular.len()), (0, 1));
    }
}
