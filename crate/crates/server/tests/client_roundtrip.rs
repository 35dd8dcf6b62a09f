mod common;

use common::*;
use ramseg_api::*;
use ramseg_client::{ClientError, RamsegClient};

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn client_drives_the_feedback_loop_over_tcp() {
    let fx = Fixture::new(6);
    let state = fx.open();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(ramseg_server::serve(state, listener, async {
        rx.await.ok();
    }));
    let client = RamsegClient::new(format!("http://{addr}")).unwrap();

    assert_eq!(client.health().await.unwrap().status, "ok");
    let built = client.build_index(fx.manifest.display().to_string()).await.unwrap();
    assert_eq!(built.count, 6);

    let (image, labels) = fresh_image(11);
    let seg = client
        .segment(&SegmentRequest {
            image: image.clone(),
            k: Some(2),
            classes: vec![],
            strategy: None,
        })
        .await
        .unwrap();
    assert_eq!(seg.masks.len(), 3);

    let flat: Vec<u16> = labels.iter().copied().collect();
    let accepted = client
        .accept(&AcceptRequest {
            proposed_id: Some("tcp-1".into()),
            image: image.clone(),
            mask: MaskPayload::Labels {
                rle: LabelRle::encode(SIZE as u32, SIZE as u32, &flat).unwrap(),
            },
            subject_id: None,
            slice_index: None,
            modality: None,
        })
        .await
        .unwrap();
    assert_eq!(accepted.index_version, built.version + 1);

    let again = client
        .segment(&SegmentRequest {
            image,
            k: Some(1),
            classes: vec![],
            strategy: None,
        })
        .await
        .unwrap();
    assert_eq!(again.hits[0].id, "tcp-1");
    assert_eq!(again.label_map.decode().unwrap(), flat);

    let dup = client
        .accept(&AcceptRequest {
            proposed_id: Some("tcp-1".into()),
            image: ImagePayload::SampleId { id: "ds0000".into() },
            mask: MaskPayload::Labels {
                rle: LabelRle::encode(SIZE as u32, SIZE as u32, &flat).unwrap(),
            },
            subject_id: None,
            slice_index: None,
            modality: None,
        })
        .await
        .unwrap_err();
    assert!(matches!(&dup, ClientError::Api { status: 409, error } if error.code == ErrorCode::DuplicateId));

    let png = client.sample_mask("tcp-1", None).await.unwrap().unwrap();
    let etag = png.etag.clone().unwrap();
    assert_eq!(client.sample_mask("tcp-1", Some(&etag)).await.unwrap(), None);
    let samples = client.samples(0, 100).await.unwrap();
    assert_eq!(samples.last().unwrap().provenance, "user_accepted");

    tx.send(()).unwrap();
    server.await.unwrap().unwrap();
}
