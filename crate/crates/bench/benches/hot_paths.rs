use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use gcn_bench::fixture;
use gcn_core::metrics::{bleu, kf1_multi, rouge, RougeVariant, Smoothing};
use gcn_core::model::encode_example;
use gcn_core::SampleSpec;

fn metrics(c: &mut Criterion) {
    let f = fixture();
    let pairs: Vec<_> = f.datapoints.windows(2).take(200).map(|w| (&w[0], &w[1])).collect();
    c.bench_function("bleu4_method7_200_pairs", |b| {
        b.iter(|| {
            for (a, r) in &pairs {
                black_box(bleu(&a.response.tokens, std::slice::from_ref(&r.response.tokens), 4, Smoothing::Method7).unwrap());
            }
        })
    });
    c.bench_function("rouge_l_200_pairs", |b| {
        b.iter(|| {
            for (a, r) in &pairs {
                black_box(rouge(&a.response.tokens, &r.response.tokens, RougeVariant::RL));
            }
        })
    });
    c.bench_function("kf1_200_pairs", |b| {
        b.iter(|| {
            for (a, _) in &pairs {
                black_box(kf1_multi(&a.response.tokens, &a.knowledge));
            }
        })
    });
}

fn retrieval(c: &mut Criterion) {
    let f = fixture();
    let contexts: Vec<_> = f.datapoints.iter().take(100).map(|d| d.context.clone()).collect();
    c.bench_function("tfidf_top3_100_contexts", |b| {
        b.iter(|| {
            for ctx in &contexts {
                black_box(f.index.top_m(ctx, 3));
            }
        })
    });
    c.bench_function("tfidf_build_index", |b| b.iter(|| black_box(gcn_core::TfidfIndex::build(&f.corpus.knowledge).unwrap())));
}

fn model(c: &mut Criterion) {
    let f = fixture();
    let ex = encode_example(&f.datapoints[0], &f.model, 20);
    c.bench_function("model_teacher_forced_nll", |b| b.iter(|| black_box(f.model.nll(&ex.input, &ex.target).unwrap())));
    c.bench_function("model_forward_backward", |b| {
        b.iter(|| {
            let mut g = gcn_core::model::graph::Graph::new();
            let lp = f.model.forward_logprobs(&mut g, &ex.input, &ex.target, None).unwrap();
            let loss = g.weighted_sum(lp, vec![-1.0; ex.target.len()]);
            black_box(g.backward(loss))
        })
    });
    let spec = SampleSpec {
        max_new_tokens: 20,
        ..SampleSpec::default()
    };
    c.bench_function("model_generate_20_tokens", |b| b.iter(|| black_box(f.model.generate(&ex.input, &spec).unwrap())));
}

criterion_group!(benches, metrics, retrieval, model);
criterion_main!(benches);
