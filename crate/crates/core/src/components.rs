//! 8-connected component labelling of binary rasters (two-pass, union-find).

use crate::slide_io::Rect;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    /// Label in the label raster, starting at 1.
    pub label: u32,
    pub area: usize,
    /// Tight, half-open bounding box.
    pub bbox: Rect,
}

#[derive(Clone, Debug)]
pub struct Components {
    pub width: usize,
    pub height: usize,
    /// 0 for background, otherwise the component label.
    pub labels: Vec<u32>,
    /// Ordered by the raster position of each component's first pixel.
    pub components: Vec<Component>,
}

impl Components {
    /// Flat indices of every pixel in component `label`.
    pub fn pixels(&self, label: u32) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == label).map(|(i, _)| i).collect()
    }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the smaller root so labels follow raster order
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

pub fn label_components(mask: &[bool], width: usize, height: usize) -> Components {
    assert_eq!(mask.len(), width * height, "mask size mismatch");
    let mut provisional = vec![u32::MAX; mask.len()];
    let mut sets = DisjointSet { parent: Vec::new() };
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !mask[i] {
                continue;
            }
            // already-visited neighbours: W, NW, N, NE
            let mut found: Option<u32> = None;
            let mut visit = |nx: isize, ny: isize, sets: &mut DisjointSet| {
                if nx < 0 || ny < 0 || nx >= width as isize {
                    return;
                }
                let l = provisional[ny as usize * width + nx as usize];
                if l == u32::MAX {
                    return;
                }
                match found {
                    None => found = Some(l),
                    Some(f) => sets.union(f, l),
                }
            };
            let (xi, yi) = (x as isize, y as isize);
            visit(xi - 1, yi, &mut sets);
            visit(xi - 1, yi - 1, &mut sets);
            visit(xi, yi - 1, &mut sets);
            visit(xi + 1, yi - 1, &mut sets);
            provisional[i] = found.unwrap_or_else(|| sets.make());
        }
    }

    let mut final_label = vec![0u32; sets.parent.len()];
    let mut labels = vec![0u32; mask.len()];
    let mut components: Vec<Component> = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if provisional[i] == u32::MAX {
                continue;
            }
            let root = sets.find(provisional[i]) as usize;
            if final_label[root] == 0 {
                components.push(Component {
                    label: components.len() as u32 + 1,
                    area: 0,
                    bbox: Rect::new(x, y, x + 1, y + 1),
                });
                final_label[root] = components.len() as u32;
            }
            let label = final_label[root];
            labels[i] = label;
            let c = &mut components[label as usize - 1];
            c.area += 1;
            c.bbox.x0 = c.bbox.x0.min(x);
            c.bbox.x1 = c.bbox.x1.max(x + 1);
            c.bbox.y1 = c.bbox.y1.max(y + 1);
        }
    }
    Components { width, height, labels, components }
}
