//! Pools a synthetic image into a superpixel cloud over a grid assignment and
//! prints the k-nearest-neighbour graph as an edge list.
//!
//! ```text
//! cargo run --release --example knn_graph -- [k] [coords|full]
//! ```

use sgseg::io::generate_synthetic;
use sgseg::sp_graph::{build_knn_graph, KnnFeatures};
use sgseg::superpixel::{coordinate_planes, pool_superpixel_features, AssignmentMap};
use sgseg_tensor::Graph;

const SIZE: usize = 24;
const CELL: usize = 8;

fn main() -> sgseg::Result<()> {
    let k: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let features: KnnFeatures = std::env::args().nth(2).as_deref().unwrap_or("full").parse()?;

    let image = generate_synthetic(1, SIZE, 3, 11)?.images.remove(0);
    let per_row = SIZE / CELL;
    let labels: Vec<usize> = (0..SIZE * SIZE).map(|p| (p / SIZE / CELL) * per_row + (p % SIZE) / CELL).collect();
    let p = AssignmentMap::one_hot(SIZE, SIZE, per_row * per_row, &labels)?;

    let mut g = Graph::new();
    let coords = g.constant(coordinate_planes(SIZE, SIZE));
    let img = g.constant(image);
    let feats = g.concat(&[coords, img])?;
    let pv = g.constant(p.into_tensor());
    let cloud = pool_superpixel_features(&mut g, feats, pv)?.to_cloud(&g);

    for s in 0..cloud.len() {
        let (x, y) = cloud.centroid(s);
        let row = cloud.feats.row(s);
        println!(
            "node {s}: centroid ({x:.2}, {y:.2}) color ({:.2}, {:.2}, {:.2}) mass {}",
            row[2], row[3], row[4], cloud.mass[s]
        );
    }
    let graph = build_knn_graph(&cloud, k, features)?;
    print!("{}", graph.to_edge_list());
    Ok(())
}
