use serde::{Deserialize, Serialize};

/// An ordered set of workers. Members are world ids in ascending order; a
/// member's rank is its position in that list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerGroup {
    members: Vec<usize>,
    /// For sub-groups, the parent rank of each member.
    parent_ranks: Option<Vec<usize>>,
}

impl WorkerGroup {
    pub fn world(size: usize) -> Self {
        Self {
            members: (0..size).collect(),
            parent_ranks: None,
        }
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn contains(&self, world: usize) -> bool {
        self.rank_of(world).is_some()
    }

    pub fn rank_of(&self, world: usize) -> Option<usize> {
        self.members.binary_search(&world).ok()
    }

    pub fn world_id(&self, rank: usize) -> usize {
        self.members[rank]
    }

    pub fn parent_rank(&self, rank: usize) -> Option<usize> {
        self.parent_ranks.as_ref().map(|p| p[rank])
    }

    pub fn is_subgroup(&self) -> bool {
        self.parent_ranks.is_some()
    }

    /// Members with `participates[rank]` set form a new group, re-ranked
    /// densely in parent order. `None` when nobody participates.
    pub fn split_subgroup(&self, participates: &[bool]) -> Option<WorkerGroup> {
        assert_eq!(
            participates.len(),
            self.size(),
            "every member must state participation"
        );
        let parent_ranks: Vec<usize> = participates
            .iter()
            .enumerate()
            .filter_map(|(rank, &p)| p.then_some(rank))
            .collect();
        if parent_ranks.is_empty() {
            return None;
        }
        Some(WorkerGroup {
            members: parent_ranks.iter().map(|&r| self.members[r]).collect(),
            parent_ranks: Some(parent_ranks),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_examples() {
        let world = WorkerGroup::world(4);
        let sub = world.split_subgroup(&[true, false, true, false]).unwrap();
        assert_eq!(sub.size(), 2);
        assert_eq!(sub.members(), &[0, 2]);
        assert_eq!(sub.rank_of(2), Some(1));
        assert_eq!(sub.parent_rank(1), Some(2));
        assert!(!sub.contains(1));

        assert!(world.split_subgroup(&[false; 4]).is_none());

        let all = world.split_subgroup(&[true; 4]).unwrap();
        assert_eq!(all.members(), world.members());
        assert!(all.is_subgroup());
    }

    #[test]
    fn nested_split_maps_into_parent() {
        let world = WorkerGroup::world(6);
        let a = world
            .split_subgroup(&[false, true, true, false, true, true])
            .unwrap();
        let b = a.split_subgroup(&[true, false, false, true]).unwrap();
        assert_eq!(b.members(), &[1, 5]);
        assert_eq!(b.parent_rank(1), Some(3));
    }
}
