#pragma once

#include <Eigen/Core>
#include <optional>
#include <unordered_map>
#include <vector>

#include "dynslam/errors.hpp"
#include "dynslam/quadcost.hpp"

// Per-frame sensor data and the association bookkeeping shared by both filter
// formulations. Associations are oracle-supplied: each measurement names the
// scenario entity it belongs to, and the registry maps those external ids to
// internal state indices.

namespace dynslam {

struct Association {
    enum class Kind { Static, Object, NewObject };
    Kind kind = Kind::Static;
    int id = -1;       // landmark id for Static, object id otherwise
    int feature = -1;  // feature id within the object, unused for Static
};

struct Measurement {
    Eigen::Vector2d z;  // body-frame position, meters
    Association assoc;
};

struct FrameData {
    int t = 0;
    std::optional<Eigen::Vector3d> odom;  // pose delta t -> t+1; absent on the last frame
    std::vector<Measurement> measurements;
};

struct ObjectTrack {
    int externalId = -1;
    int firstTime = -1;
    std::vector<int> featureIds;   // external feature ids; position is the internal index
    int currentCloudTime = -1;     // frame of the current cloud, -1 before the second sighting
    std::vector<int> poseTimes;    // frames with pose variables, ascending
};

/// Maps scenario entity ids to internal state indices. Both backends drive an
/// identical registry so their layouts stay aligned.
class TrackRegistry {
public:
    int landmarkCount() const { return static_cast<int>(landmarkIds_.size()); }
    int objectCount() const { return static_cast<int>(objects_.size()); }

    bool hasLandmark(int externalId) const { return landmarkIndex_.count(externalId) > 0; }
    int landmarkIndexOf(int externalId) const;
    int landmarkIdAt(int k) const { return landmarkIds_[k]; }

    bool hasObject(int externalId) const { return objectIndex_.count(externalId) > 0; }
    int objectIndexOf(int externalId) const;
    const ObjectTrack& object(int alpha) const { return objects_[alpha]; }
    int objectFeatureIndexOf(int alpha, int externalFeatureId) const;

    int registerLandmark(int externalId);
    int registerObject(int externalId, const std::vector<int>& featureIds, int firstTime);
    void setCurrentCloudTime(int alpha, int t) { objects_[alpha].currentCloudTime = t; }

    /// Records a pose at frame `t`; when `dropHistory`, trims to the three most
    /// recent poses and returns the frames that fell off.
    std::vector<int> addPose(int alpha, int t, bool dropHistory);

private:
    std::vector<int> landmarkIds_;
    std::unordered_map<int, int> landmarkIndex_;
    std::vector<ObjectTrack> objects_;
    std::unordered_map<int, int> objectIndex_;
};

/// One frame's measurements split by what the registry already knows.
struct FramePartition {
    std::vector<std::pair<int, Eigen::Vector2d>> newStatic;       // external id, z
    std::vector<std::pair<int, Eigen::Vector2d>> existingStatic;  // internal k, z
    struct ObjectObs {
        int alpha = -1;
        std::vector<std::pair<int, Eigen::Vector2d>> features;  // internal feature index, z
    };
    std::vector<ObjectObs> trackedObjects;
    struct NewObjectObs {
        int externalId = -1;
        std::vector<std::pair<int, Eigen::Vector2d>> features;  // external feature id, z
    };
    std::vector<NewObjectObs> newObjects;
};

/// Splits measurements against the registry without mutating it. Throws
/// AssociationError on references to unknown objects or features, and on
/// NewObject declarations for objects already tracked.
FramePartition partitionFrame(const TrackRegistry& registry, const FrameData& frame);

}  // namespace dynslam
