#include "dynslam/frame.hpp"

#include <algorithm>
#include <string>

namespace dynslam {

int TrackRegistry::landmarkIndexOf(int externalId) const {
    const auto it = landmarkIndex_.find(externalId);
    if (it == landmarkIndex_.end())
        throw AssociationError("unknown landmark id " + std::to_string(externalId));
    return it->second;
}

int TrackRegistry::objectIndexOf(int externalId) const {
    const auto it = objectIndex_.find(externalId);
    if (it == objectIndex_.end())
        throw AssociationError("unknown object id " + std::to_string(externalId));
    return it->second;
}

int TrackRegistry::objectFeatureIndexOf(int alpha, int externalFeatureId) const {
    const auto& ids = objects_[alpha].featureIds;
    const auto it = std::find(ids.begin(), ids.end(), externalFeatureId);
    if (it == ids.end())
        throw AssociationError("unknown feature " + std::to_string(externalFeatureId) +
                               " on object " + std::to_string(objects_[alpha].externalId));
    return static_cast<int>(it - ids.begin());
}

int TrackRegistry::registerLandmark(int externalId) {
    if (hasLandmark(externalId))
        throw AssociationError("landmark " + std::to_string(externalId) + " already tracked");
    landmarkIds_.push_back(externalId);
    const int k = landmarkCount() - 1;
    landmarkIndex_[externalId] = k;
    return k;
}

int TrackRegistry::registerObject(int externalId, const std::vector<int>& featureIds,
                                  int firstTime) {
    if (hasObject(externalId))
        throw AssociationError("object " + std::to_string(externalId) + " already tracked");
    if (featureIds.empty())
        throw AssociationError("object " + std::to_string(externalId) + " declared featureless");
    ObjectTrack track;
    track.externalId = externalId;
    track.firstTime = firstTime;
    track.featureIds = featureIds;
    objects_.push_back(std::move(track));
    const int alpha = objectCount() - 1;
    objectIndex_[externalId] = alpha;
    return alpha;
}

std::vector<int> TrackRegistry::addPose(int alpha, int t, bool dropHistory) {
    auto& times = objects_[alpha].poseTimes;
    times.push_back(t);
    std::vector<int> dropped;
    if (dropHistory && times.size() > 3) {
        dropped.assign(times.begin(), times.end() - 3);
        times.erase(times.begin(), times.end() - 3);
    }
    return dropped;
}

FramePartition partitionFrame(const TrackRegistry& registry, const FrameData& frame) {
    FramePartition out;
    std::unordered_map<int, int> trackedSlot;    // alpha -> index in trackedObjects
    std::unordered_map<int, int> newObjectSlot;  // external id -> index in newObjects
    for (const auto& m : frame.measurements) {
        switch (m.assoc.kind) {
            case Association::Kind::Static:
                if (registry.hasLandmark(m.assoc.id))
                    out.existingStatic.emplace_back(registry.landmarkIndexOf(m.assoc.id), m.z);
                else
                    out.newStatic.emplace_back(m.assoc.id, m.z);
                break;
            case Association::Kind::Object: {
                const int alpha = registry.objectIndexOf(m.assoc.id);
                const int k = registry.objectFeatureIndexOf(alpha, m.assoc.feature);
                auto [it, inserted] = trackedSlot.try_emplace(
                    alpha, static_cast<int>(out.trackedObjects.size()));
                if (inserted) out.trackedObjects.push_back({alpha, {}});
                out.trackedObjects[it->second].features.emplace_back(k, m.z);
                break;
            }
            case Association::Kind::NewObject: {
                if (registry.hasObject(m.assoc.id))
                    throw AssociationError("object " + std::to_string(m.assoc.id) +
                                           " redeclared as new");
                auto [it, inserted] = newObjectSlot.try_emplace(
                    m.assoc.id, static_cast<int>(out.newObjects.size()));
                if (inserted) out.newObjects.push_back({m.assoc.id, {}});
                out.newObjects[it->second].features.emplace_back(m.assoc.feature, m.z);
                break;
            }
        }
    }
    for (auto& obj : out.trackedObjects) {
        std::sort(obj.features.begin(), obj.features.end(),
                  [](const auto& a, const auto& b) { return a.first < b.first; });
    }
    return out;
}

}  // namespace dynslam
