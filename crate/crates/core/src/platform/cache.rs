use std::collections::{HashMap, VecDeque};

/// Least-recently-used map with a fixed capacity.
#[derive(Debug)]
pub struct LruCache<V> {
    capacity: usize,
    order: VecDeque<String>,
    entries: HashMap<String, V>,
}

impl<V: Clone> LruCache<V> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            order: VecDeque::new(),
            entries: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn touch(&mut self, key: &str) {
        if let Some(i) = self.order.iter().position(|k| k == key) {
            let k = self.order.remove(i).expect("present");
            self.order.push_back(k);
        }
    }

    pub fn get(&mut self, key: &str) -> Option<V> {
        let v = self.entries.get(key).cloned()?;
        self.touch(key);
        Some(v)
    }

    /// Inserts `value`, returning the evicted key if the cache was full.
    pub fn insert(&mut self, key: &str, value: V) -> Option<String> {
        if self.entries.insert(key.to_string(), value).is_some() {
            self.touch(key);
            return None;
        }
        self.order.push_back(key.to_string());
        if self.order.len() > self.capacity {
            let old = self.order.pop_front().expect("nonempty");
            self.entries.remove(&old);
            return Some(old);
        }
        None
    }

    pub fn clear(&mut self) {
        self.order.clear();
        self.entries.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evicts_least_recent() {
        let mut c = LruCache::new(2);
        assert_eq!(c.insert("a", 1), None);
        assert_eq!(c.insert("b", 2), None);
        assert_eq!(c.get("a"), Some(1));
        assert_eq!(c.insert("c", 3), Some("b".to_string()));
        assert!(c.contains("a") && c.contains("c") && !c.contains("b"));
        assert_eq!(c.len(), 2);
    }
}
