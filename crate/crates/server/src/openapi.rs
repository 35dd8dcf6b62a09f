use serde_json::{json, Value};

fn op(summary: &str, request: Option<&str>, response: &str, errors: &[u16]) -> Value {
    let mut responses = serde_json::Map::new();
    responses.insert(
        "200".into(),
        json!({"description": "ok", "content": {"application/json": {"schema": {"$ref": format!("#/components/schemas/{response}")}}}}),
    );
    for code in errors {
        responses.insert(
            code.to_string(),
            json!({"description": "error", "content": {"application/json": {"schema": {"$ref": "#/components/schemas/ApiError"}}}}),
        );
    }
    let mut out = json!({"summary": summary, "responses": responses});
    if let Some(req) = request {
        out["requestBody"] = json!({
            "required": true,
            "content": {"application/json": {"schema": {"$ref": format!("#/components/schemas/{req}")}}}
        });
    }
    out
}

fn png_op(summary: &str) -> Value {
    json!({
        "summary": summary,
        "parameters": [{"name": "id", "in": "path", "required": true, "schema": {"type": "string"}}],
        "responses": {
            "200": {"description": "PNG with a content-hash ETag", "content": {"image/png": {}}},
            "304": {"description": "matches If-None-Match"},
            "404": {"description": "unknown id"}
        }
    })
}

/// OpenAPI 3.1 description of the service.
pub fn document() -> Value {
    let image_payload = json!({
        "oneOf": [
            {"type": "object", "required": ["kind", "id"], "properties": {"kind": {"const": "sample_id"}, "id": {"type": "string"}}},
            {"type": "object", "required": ["kind", "data_base64"], "properties": {"kind": {"const": "encoded"}, "data_base64": {"type": "string", "description": "PNG or .npy bytes"}}},
            {"type": "object", "required": ["kind", "height", "width", "pixels"], "properties": {"kind": {"const": "raw"}, "height": {"type": "integer"}, "width": {"type": "integer"}, "pixels": {"type": "array", "items": {"type": "number"}}}}
        ]
    });
    let binary_rle = json!({
        "type": "object",
        "description": "Row-major alternating runs, first run counts zeros; foreground is the number of ones.",
        "properties": {"height": {"type": "integer"}, "width": {"type": "integer"}, "counts": {"type": "array", "items": {"type": "integer"}}, "foreground": {"type": "integer"}}
    });
    let label_rle = json!({
        "type": "object",
        "description": "Row-major [label, length] runs.",
        "properties": {"height": {"type": "integer"}, "width": {"type": "integer"}, "runs": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2}}}
    });
    let hit = json!({"type": "object", "properties": {
        "id": {"type": "string"}, "distance": {"type": "number", "description": "squared L2; -1 for random picks"}, "rank": {"type": "integer"},
        "thumbnail_url": {"type": "string"}, "mask_url": {"type": "string"}
    }});
    json!({
        "openapi": "3.1.0",
        "info": {"title": "ramseg", "version": env!("CARGO_PKG_VERSION")},
        "paths": {
            "/api/index/build": {"post": op("Rebuild the index from a dataset manifest", Some("BuildIndexRequest"), "BuildIndexResponse", &[400, 404, 503])},
            "/api/retrieve": {"post": op("Top-k exemplars for an image", Some("RetrieveRequest"), "RetrieveResponse", &[400, 404, 409, 422, 503])},
            "/api/segment": {"post": op("Retrieve exemplars and segment every requested class", Some("SegmentRequest"), "SegmentResponse", &[400, 404, 409, 422, 503])},
            "/api/annotations/accept": {"post": op("Add a corrected annotation to the database", Some("AcceptRequest"), "AcceptResponse", &[400, 409, 413, 422, 503])},
            "/api/index/stats": {"get": op("Index size and version", None, "StatsResponse", &[])},
            "/api/health": {"get": op("Loaded models", None, "HealthResponse", &[])},
            "/api/samples": {"get": op("Sample ids in index order (offset, limit)", None, "SampleList", &[])},
            "/api/samples/{id}/image": {"get": png_op("8-bit display image")},
            "/api/samples/{id}/mask": {"get": png_op("Label mask")}
        },
        "components": {
            "schemas": {
                "ImagePayload": image_payload,
                "MaskPayload": {"oneOf": [
                    {"type": "object", "properties": {"kind": {"const": "encoded"}, "data_base64": {"type": "string"}}},
                    {"type": "object", "properties": {"kind": {"const": "labels"}, "rle": {"$ref": "#/components/schemas/LabelRle"}}}
                ]},
                "BinaryRle": binary_rle,
                "LabelRle": label_rle,
                "Hit": hit,
                "BuildIndexRequest": {"type": "object", "required": ["manifest_path"], "properties": {"manifest_path": {"type": "string"}, "backbone": {"type": "string"}}},
                "BuildIndexResponse": {"type": "object", "properties": {"version": {"type": "integer"}, "count": {"type": "integer"}, "dim": {"type": "integer"}, "backbone": {"type": "string"}, "archived_journal": {"type": ["string", "null"]}}},
                "RetrieveRequest": {"type": "object", "required": ["image"], "properties": {"image": {"$ref": "#/components/schemas/ImagePayload"}, "k": {"type": "integer"}, "strategy": {"type": "string", "description": "embedding | random:<seed>"}}},
                "RetrieveResponse": {"type": "object", "properties": {"hits": {"type": "array", "items": {"$ref": "#/components/schemas/Hit"}}, "index_version": {"type": "integer"}, "warnings": {"type": "array", "items": {"type": "string"}}}},
                "SegmentRequest": {"type": "object", "required": ["image"], "properties": {"image": {"$ref": "#/components/schemas/ImagePayload"}, "k": {"type": "integer"}, "classes": {"type": "array", "items": {"type": "string"}}, "strategy": {"type": "string"}}},
                "SegmentResponse": {"type": "object", "properties": {
                    "height": {"type": "integer"}, "width": {"type": "integer"},
                    "masks": {"type": "array", "items": {"type": "object", "properties": {"class_label": {"type": "integer"}, "class_name": {"type": "string"}, "rle": {"$ref": "#/components/schemas/BinaryRle"}, "score": {"type": "number"}, "exemplar_ids": {"type": "array", "items": {"type": "string"}}}}},
                    "label_map": {"$ref": "#/components/schemas/LabelRle"},
                    "hits": {"type": "array", "items": {"$ref": "#/components/schemas/Hit"}},
                    "k_requested": {"type": "integer"}, "k_used": {"type": "integer"}, "strategy": {"type": "string"},
                    "timings_ms": {"type": "object"}, "exemplar_ids": {"type": "array", "items": {"type": "string"}}, "index_version": {"type": "integer"}, "warnings": {"type": "array", "items": {"type": "string"}}
                }},
                "AcceptRequest": {"type": "object", "required": ["image", "mask"], "properties": {"proposed_id": {"type": "string"}, "image": {"$ref": "#/components/schemas/ImagePayload"}, "mask": {"$ref": "#/components/schemas/MaskPayload"}, "subject_id": {"type": "string"}, "slice_index": {"type": "integer"}, "modality": {"type": "string"}}},
                "AcceptResponse": {"type": "object", "properties": {"id": {"type": "string"}, "index_version": {"type": "integer"}, "accepted_count": {"type": "integer"}}},
                "StatsResponse": {"type": "object", "properties": {"count": {"type": "integer"}, "dim": {"type": "integer"}, "version": {"type": "integer"}, "dataset_count": {"type": "integer"}, "accepted_count": {"type": "integer"}, "backbone": {"type": "string"}, "engine": {"type": "string"}, "class_map": {"type": "object"}}},
                "HealthResponse": {"type": "object", "properties": {"status": {"type": "string"}, "engine": {"type": "string"}, "checkpoint_loaded": {"type": "boolean"}, "backbone": {"type": "string"}, "backbone_pretrained": {"type": "boolean"}, "diagnostics": {"type": "array", "items": {"type": "string"}}}},
                "SampleList": {"type": "array", "items": {"type": "object", "properties": {"id": {"type": "string"}, "provenance": {"type": "string"}, "height": {"type": "integer"}, "width": {"type": "integer"}}}},
                "ApiError": {"type": "object", "required": ["code", "message", "http_status"], "properties": {
                    "code": {"type": "string", "enum": [
                        "BAD_REQUEST", "INVALID_K", "INVALID_ID", "UNKNOWN_CLASS", "SHAPE_MISMATCH", "NOT_FOUND",
                        "DUPLICATE_ID", "EMPTY_INDEX", "PAYLOAD_TOO_LARGE", "UNPROCESSABLE", "BUSY", "CHECKPOINT_MISSING", "INTERNAL"
                    ]},
                    "message": {"type": "string"},
                    "http_status": {"type": "integer"}
                }}
            }
        }
    })
}
