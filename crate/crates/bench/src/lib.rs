//! Synthetic fixtures shared by the benchmarks and the end-to-end tests.

use flakysieve::dataset::{Dataset, FlakyCatCategory, FlakyTest, Label, Taxonomy};
use flakysieve::embed::{EmbeddingStore, EmbeddingVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Category sizes of the FlakyCat dataset, in `FlakyCatCategory::ALL` order.
pub const FLAKYCAT_SIZES: [usize; 5] = [125, 48, 42, 103, 51];

const WORDS: &[&str] = &[
    "alpha", "queue", "worker", "cache", "order", "timer", "socket", "ledger", "batch", "index",
];

/// A JUnit-style test method with locals, numeric and string literals.
pub fn java_test(name: &str, rng: &mut impl Rng) -> String {
    let a = rng.random_range(2..500);
    let b = rng.random_range(100..90_000);
    let w = WORDS[rng.random_range(0..WORDS.len())];
    let r = rng.random_range(1..99);
    match rng.random_range(0..3) {
        0 => format!(
            r#"@Test
public void {name}() throws Exception {{
    int count = {a};
    long timeoutMs = {b}L;
    String key = "{w}-{a}";
    double ratio = 0.{r:02};
    for (int i = 0; i < count; i++) {{
        service.submit(key + i, ratio);
    }}
    Thread.sleep(timeoutMs);
    assertEquals(count, service.size());
}}
"#
        ),
        1 => format!(
            r#"@Test
public void {name}() {{
    Map<String, Integer> seen = new HashMap<>();
    int limit = {a};
    float scale = {r}.5f;
    seen.put("{w}", limit);
    // iteration order is not guaranteed
    for (String k : seen.keySet()) {{
        assertTrue(k.length() > 0);
    }}
    assertEquals("[{w}]", seen.keySet().toString());
    assertEquals(limit * scale, compute(limit), 0.001);
}}
"#
        ),
        _ => format!(
            r#"@Test
public void {name}() throws InterruptedException {{
    final long start = System.currentTimeMillis();
    int attempts = {a};
    char sep = ',';
    String expected = "{w}";
    while (attempts > 0) {{
        attempts--;
        if (client.poll("{w}") != null) break;
    }}
    long elapsed = System.currentTimeMillis() - start;
    assertTrue(elapsed < {b});
    assertEquals(expected + sep, client.last());
}}
"#
        ),
    }
}

/// A 369-test dataset with the FlakyCat category sizes and generated sources.
pub fn flakycat_dataset(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tests = Vec::new();
    for (cat, &n) in FlakyCatCategory::ALL.iter().zip(&FLAKYCAT_SIZES) {
        let label = Label::FlakyCat(*cat);
        for i in 0..n {
            let name = format!("test{}{i}", label.token().replace('_', ""));
            tests.push(FlakyTest {
                id: format!("{}-{i:03}", label.token()),
                project: format!("project{}", i % 4),
                source: java_test(&name, &mut rng),
                label,
            });
        }
    }
    Dataset::new(Taxonomy::FlakyCat, tests).expect("generated ids are unique")
}

/// Gaussian clusters, one per FlakyCat category (at most five).
pub struct Clusters {
    pub dataset: Dataset,
    pub store: EmbeddingStore,
}

/// `classes` isotropic clusters with standard deviation `sigma` in `dim`
/// dimensions. Class `k` is centred at `spread·sigma·e_k`, so centres sit
/// `spread·sigma·√2` apart.
pub fn clusters(
    classes: usize,
    per_class: usize,
    dim: usize,
    sigma: f64,
    spread: f64,
    seed: u64,
) -> Clusters {
    assert!(classes <= FlakyCatCategory::ALL.len() && classes <= dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    let mut store = EmbeddingStore::new(dim);
    let mut tests = Vec::new();
    for (k, cat) in FlakyCatCategory::ALL.iter().take(classes).enumerate() {
        let label = Label::FlakyCat(*cat);
        for i in 0..per_class {
            let id = format!("{}-{i:03}", label.token());
            let v: Vec<f32> = (0..dim)
                .map(|d| {
                    let centre = if d == k { spread * sigma } else { 0.0 };
                    (centre + noise.sample(&mut rng)) as f32
                })
                .collect();
            store
                .insert(id.clone(), EmbeddingVector::new(v).expect("finite"))
                .expect("unique ids");
            tests.push(FlakyTest {
                id,
                project: "synthetic".into(),
                source: format!("void t{k}_{i}() {{}}"),
                label,
            });
        }
    }
    Clusters {
        dataset: Dataset::new(Taxonomy::FlakyCat, tests).expect("unique ids"),
        store,
    }
}

/// Uniform random vectors in `[-1, 1]`.
pub fn random_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect()
}
